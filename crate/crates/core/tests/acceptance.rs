//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Run with `--nocapture` to see the lines.

use std::path::Path;
use std::time::{Duration, Instant};

use tbava::adapter::{attention, AdapterTrace, GateOverride, PlacedProj};
use tbava::data::{bayes_oracle, cooccurrence_classifier, generate, generate_split, segment_accuracy, EvidenceBasis};
use tbava::data::{GeneratorConfig, SegmentFlag, SyntheticSample};
use tbava::encoders::{Backbone, BackboneConfig};
use tbava::experiment::{run_ablation, ExperimentConfig};
use tbava::init::{normal, orthogonal, rng};
use tbava::text_anchor::default_classes;
use tbava::training::{
    census, encode_prefixes, forward_full, grad_check, predict_logits, train, EncodedPrefix, ForwardOptions,
    GradCheckConfig, Model, TrainConfig, TrainMode,
};
use tbava::{Tape, Tensor};

/// Training steps per ablation run; chosen so five seeds fit the time budget.
const ABLATION_STEPS: usize = 600;
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{verdict}] {title}: {} ({:.1}s)", o.detail, t0.elapsed().as_secs_f64());
    o.pass
}

// ---- 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut checked = 0;
    for mode in [TrainMode::TbavaFull, TrainMode::TbavaNoGsm] {
        let report = grad_check(&GradCheckConfig {
            mode,
            ..GradCheckConfig::default()
        })
        .unwrap();
        checked += report.params.len();
        worst = worst.max(report.max_rel_err());
        failed.extend(report.failures().iter().map(|p| format!("{}:{}", mode.name(), p.name)));
    }
    let elapsed = t0.elapsed();
    let pass = failed.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!("{checked} parameter tensors, max rel err {worst:.2e}, failures {failed:?}, {:.1}s", elapsed.as_secs_f64()),
    )
}

// ---- 2 ------------------------------------------------------------------------

fn identity_at_init() -> Outcome {
    let bc = BackboneConfig::default();
    let backbone = Backbone::init(11, &bc).unwrap();
    let gen = GeneratorConfig {
        seed: 11,
        ..GeneratorConfig::default()
    };
    let basis = EvidenceBasis::new(&gen, &backbone.codebook).unwrap();
    let samples = generate_split(&gen, &basis, "identity", 100).unwrap();
    let classes = default_classes(bc.n_classes);
    let cfg = |mode| TrainConfig {
        seed: 11,
        mode,
        ..TrainConfig::default()
    };
    let full = Model::init(&backbone, &classes, &cfg(TrainMode::TbavaFull)).unwrap();
    let base = Model::init(&backbone, &classes, &cfg(TrainMode::BackboneOnly)).unwrap();
    let pf = encode_prefixes(&backbone, &full, &samples).unwrap();
    let pb = encode_prefixes(&backbone, &base, &samples).unwrap();
    let mut mismatched = 0;
    for (a, b) in pf.iter().zip(&pb) {
        let la = predict_logits(&backbone, &full, a, ForwardOptions::default()).unwrap();
        let lb = predict_logits(&backbone, &base, b, ForwardOptions::default()).unwrap();
        mismatched += usize::from(la.to_le_bytes() != lb.to_le_bytes());
    }
    outcome(mismatched == 0, format!("{mismatched}/100 samples differ bitwise"))
}

// ---- 3 and 4 ------------------------------------------------------------------

struct Traced {
    logits: Tensor,
    traces: Vec<TraceValues>,
}

struct TraceValues {
    z: [Tensor; 2],
    z_mod: [Tensor; 2],
    gates: Vec<Tensor>,
    attention: Vec<Tensor>,
}

fn traced(backbone: &Backbone, model: &Model, prefix: &EncodedPrefix, gate_override: GateOverride) -> Traced {
    let mut tape = Tape::new();
    let placed = model.place(&mut tape).unwrap();
    let out = forward_full(&mut tape, backbone, model, &placed, prefix, ForwardOptions { gate_override, trace: true }).unwrap();
    let v = |x| tape.value(x).clone();
    let values = |t: &AdapterTrace| TraceValues {
        z: [v(t.z_v), v(t.z_a)],
        z_mod: [v(t.z_v_mod), v(t.z_a_mod)],
        gates: t
            .gates_v
            .iter()
            .chain(&t.gates_a)
            .flat_map(|g| [v(g.w_cross), v(g.w_text)])
            .collect(),
        attention: t.attention.iter().map(|&w| v(w)).collect(),
    };
    Traced {
        logits: v(out.logits),
        traces: out.traces.iter().map(values).collect(),
    }
}

struct Trained {
    backbone: Backbone,
    model: Model,
    test: Vec<SyntheticSample>,
    digest_before: String,
    digest_after: String,
}

fn train_500_steps() -> Trained {
    let bc = BackboneConfig::default();
    let backbone = Backbone::init(21, &bc).unwrap();
    let gen = GeneratorConfig {
        seed: 21,
        ..GeneratorConfig::default()
    };
    let (train_set, test) = generate(&gen, &backbone.codebook).unwrap();
    let cfg = TrainConfig {
        seed: 21,
        steps: 500,
        eval_every: 500,
        mode: TrainMode::TbavaFull,
        ..TrainConfig::default()
    };
    let digest_before = backbone.weight_digest();
    let trained = train(&backbone, &default_classes(bc.n_classes), &cfg, &train_set, &test).unwrap();
    let digest_after = backbone.weight_digest();
    Trained {
        backbone,
        model: trained.model,
        test: test[..100].to_vec(),
        digest_before,
        digest_after,
    }
}

fn freeze_contract(t: &Trained) -> Outcome {
    outcome(
        t.digest_before == t.digest_after,
        format!("sha256 before {}.. after {}..", &t.digest_before[..16], &t.digest_after[..16]),
    )
}

fn gate_invariants(t: &Trained) -> Outcome {
    let prefixes = encode_prefixes(&t.backbone, &t.model, &t.test).unwrap();
    let segments: usize = t.test.iter().map(|s| s.segment_label.len()).sum();
    let mut plain = t.model.clone();
    plain.mode = TrainMode::TbavaNoGsm;

    let (mut gate_values, mut out_of_range) = (0usize, 0usize);
    let (mut zero_diff, mut one_diff) = (0.0f64, 0.0f64);
    let mut logits_differ = 0;
    for prefix in &prefixes {
        let free = traced(&t.backbone, &t.model, prefix, GateOverride::None);
        for tr in &free.traces {
            for g in &tr.gates {
                // One gate vector per segment: gates broadcast over every segment of the sample.
                let per_segment = prefix.visual.shape()[0];
                gate_values += g.numel() * per_segment;
                out_of_range += g.data().iter().filter(|&&x| !(x > 0.0 && x < 1.0)).count() * per_segment;
            }
        }

        let zeros = traced(&t.backbone, &t.model, prefix, GateOverride::Constant(0.0));
        for tr in &zeros.traces {
            for (z, zm) in tr.z.iter().zip(&tr.z_mod) {
                zero_diff = zero_diff.max(max_abs_diff(z, zm));
            }
        }

        let ones = traced(&t.backbone, &t.model, prefix, GateOverride::Constant(1.0));
        let reference = traced(&t.backbone, &plain, prefix, GateOverride::None);
        for (a, b) in ones.traces.iter().zip(&reference.traces) {
            for (x, y) in a.z_mod.iter().zip(&b.z_mod) {
                one_diff = one_diff.max(max_abs_diff(x, y));
            }
        }
        logits_differ += usize::from(ones.logits.to_le_bytes() != reference.logits.to_le_bytes());
    }
    let pass = segments >= 1000 && gate_values > 0 && out_of_range == 0 && zero_diff == 0.0 && one_diff == 0.0 && logits_differ == 0;
    outcome(
        pass,
        format!(
            "{segments} segments, {out_of_range}/{gate_values} gate values outside (0,1), \
             gates=0 max|z'-z| {zero_diff:e}, gates=1 max|z'-plain| {one_diff:e}, {logits_differ} logit mismatches"
        ),
    )
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- 5 ------------------------------------------------------------------------

fn worst_row_sum_error(w: &Tensor) -> f64 {
    let k = *w.shape().last().unwrap();
    w.data()
        .chunks(k)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn attention_normalization(t: &Trained) -> Outcome {
    let mut r = rng(55);
    let mut worst = 0.0f64;
    let mut slices = 0usize;
    for trial in 0..200 {
        let heads = [1, 2, 4][trial % 3];
        let d = 4 * (1 + trial % 3);
        let (b, nq, nk) = (1 + trial % 4, 1 + trial % 5, 1 + trial % 7);
        let scale = [0.1, 1.0, 10.0, 100.0][trial % 4];
        let q = normal(&[b, nq, d], scale, &mut r);
        let kv = normal(&[b, nk, d], scale, &mut r);
        let proj = [orthogonal(d, d, 1.0, &mut r), normal(&[d, d], 1.0, &mut r), orthogonal(d, d, 2.0, &mut r)];
        let mut tape = Tape::new();
        let qv = tape.input(q);
        let kvv = tape.input(kv);
        let placed = (trial % 2 == 0).then(|| PlacedProj {
            wq: tape.input(proj[0].clone()),
            wk: tape.input(proj[1].clone()),
            wv: tape.input(proj[2].clone()),
        });
        let (_, weights) = attention(&mut tape, qv, kvv, placed, heads).unwrap();
        for w in weights {
            let w = tape.value(w);
            slices += w.numel() / w.shape().last().unwrap();
            worst = worst.max(worst_row_sum_error(w));
        }
    }
    // Weights observed inside the trained model.
    let prefixes = encode_prefixes(&t.backbone, &t.model, &t.test[..10]).unwrap();
    for p in &prefixes {
        for tr in traced(&t.backbone, &t.model, p, GateOverride::None).traces {
            for w in &tr.attention {
                slices += w.numel() / w.shape().last().unwrap();
                worst = worst.max(worst_row_sum_error(w));
            }
        }
    }
    outcome(worst <= 1e-9, format!("{slices} slices, max |sum - 1| {worst:.2e}"))
}

// ---- 6 ------------------------------------------------------------------------

fn ablation_ordering() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = ABLATION_STEPS;
    let t0 = Instant::now();
    let report = run_ablation(&cfg, &ABLATION_SEEDS, None).unwrap();
    let elapsed = t0.elapsed();
    print!("{}", report.table());
    let mean = |m| report.summary(m).unwrap().mean;
    let (full, plain, base) = (mean(TrainMode::TbavaFull), mean(TrainMode::TbavaNoGsm), mean(TrainMode::BackboneOnly));
    let oracle = report.oracle_mean();
    let pass = full > plain
        && plain > base
        && full - base >= 0.03
        && full.max(plain).max(base) < oracle
        && elapsed < ABLATION_BUDGET;
    outcome(
        pass,
        format!(
            "{} seeds x {ABLATION_STEPS} steps: full {full:.4}, no_gsm {plain:.4}, backbone {base:.4}, \
             oracle {oracle:.4}, full-backbone {:+.2}pp, full-no_gsm {:+.2}pp, {:.0}s",
            ABLATION_SEEDS.len(),
            100.0 * (full - base),
            100.0 * (full - plain),
            elapsed.as_secs_f64()
        ),
    )
}

// ---- 7 ------------------------------------------------------------------------

fn cooccurrence_failure() -> Outcome {
    let bc = BackboneConfig::default();
    let backbone = Backbone::init(31, &bc).unwrap();
    let gen = GeneratorConfig {
        seed: 31,
        p_offscreen: 0.2,
        p_silent: 0.2,
        ..GeneratorConfig::default()
    };
    let basis = EvidenceBasis::new(&gen, &backbone.codebook).unwrap();
    let samples = generate_split(&gen, &basis, "montecarlo", 1000).unwrap();
    let ambiguous = |f: SegmentFlag| matches!(f, SegmentFlag::OffscreenSound | SegmentFlag::SilentEntity);
    let n_segments: usize = samples.iter().map(|s| s.segment_label.len()).sum();
    let n_ambiguous = samples
        .iter()
        .flat_map(|s| &s.trace)
        .filter(|t| ambiguous(t.flag))
        .count();
    let oracle = segment_accuracy(&samples, |s| bayes_oracle(&basis, s), ambiguous);
    let cooc = segment_accuracy(&samples, |s| cooccurrence_classifier(&basis, s), ambiguous);
    let gap = oracle - cooc;
    outcome(
        n_segments >= 10_000 && gap >= 0.10,
        format!("{n_ambiguous} ambiguous of {n_segments} segments: oracle {oracle:.4}, co-occurrence {cooc:.4}, gap {:.1}pp", 100.0 * gap),
    )
}

// ---- 8 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = 40;
    cfg.train.eval_every = 20;
    let seeds = [1, 2, 3];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ablation(&cfg, &seeds, Some(a.path())).unwrap();
    run_ablation(&cfg, &seeds, Some(b.path())).unwrap();
    let files = csv_files(a.path());
    let differing: Vec<String> = files
        .iter()
        .filter(|name| std::fs::read(a.path().join(name)).ok() != std::fs::read(b.path().join(name)).ok())
        .cloned()
        .collect();
    let pass = files.len() == 1 + 3 * seeds.len() && differing.is_empty() && csv_files(b.path()) == files;
    outcome(pass, format!("{} CSV files compared, differing {differing:?}", files.len()))
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

// ---- 9 ------------------------------------------------------------------------

/// Frozen weights counted from the architecture alone.
fn analytic_frozen(bc: &BackboneConfig) -> usize {
    let block = |d: usize| {
        let h = bc.mlp_ratio * d;
        4 * d * d + d * h + h + h * d + d
    };
    let stack = |d: usize, n_tokens: usize, input: usize| bc.n_layers * block(d) + input * n_tokens * d + n_tokens * d;
    stack(bc.d_visual, bc.n_visual_tokens, bc.evidence_width)
        + stack(bc.d_audio, bc.n_audio_tokens, bc.evidence_width)
        + stack(bc.d_text, 0, 0)
        + bc.n_classes * bc.d_text
        + 2 * bc.d_text
}

/// Trainable weights counted from the configuration alone.
fn analytic_trainable(bc: &BackboneConfig, cfg: &TrainConfig) -> usize {
    let head = (bc.d_visual + bc.d_audio) * (bc.n_classes + 1) + bc.n_classes + 1;
    if cfg.mode == TrainMode::BackboneOnly {
        return head;
    }
    let (db, dh) = (cfg.adapter.d_bottleneck, cfg.adapter.d_hidden);
    let down = (bc.d_visual + bc.d_audio + bc.d_text) * db;
    let up = db * (bc.d_visual + bc.d_audio);
    let attn = if cfg.adapter.qkv_projections { 4 * 3 * db * db } else { 0 };
    let gates = if cfg.mode == TrainMode::TbavaFull {
        2 * (db * dh + dh + dh * 2 * db + 2 * db)
    } else {
        0
    };
    let adapters = cfg.adapter_layers.len() * (down + up + attn + gates);
    adapters + 2 * cfg.soft_prompts * bc.d_text + head
}

fn parameter_census() -> Outcome {
    let bc = BackboneConfig::default();
    let backbone = Backbone::init(41, &bc).unwrap();
    let classes = default_classes(bc.n_classes);
    let mut lines = Vec::new();
    let mut pass = true;
    for mode in TrainMode::ALL {
        let cfg = TrainConfig {
            mode,
            seed: 41,
            ..TrainConfig::default()
        };
        let model = Model::init(&backbone, &classes, &cfg).unwrap();
        let reported = census(&backbone, &model);
        let trainable = analytic_trainable(&bc, &cfg);
        let total = trainable + analytic_frozen(&bc);
        let ratio = trainable as f64 / total as f64;
        pass &= reported.trainable == trainable && reported.total == total && reported.ratio == ratio;
        lines.push(format!("{} {trainable}/{total} = {ratio:.5} (reported {:.5})", mode.name(), reported.ratio));
    }
    outcome(pass, lines.join("; "))
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    results.push(run(1, "gradient correctness", gradient_correctness));
    results.push(run(2, "identity at init", identity_at_init));
    let trained = train_500_steps();
    results.push(run(3, "freeze contract", || freeze_contract(&trained)));
    results.push(run(4, "gate invariants", || gate_invariants(&trained)));
    results.push(run(5, "attention normalization", || attention_normalization(&trained)));
    results.push(run(6, "ablation ordering", ablation_ordering));
    results.push(run(7, "co-occurrence failure", cooccurrence_failure));
    results.push(run(8, "determinism", determinism));
    results.push(run(9, "parameter census", parameter_census));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
