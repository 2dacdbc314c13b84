use tbava::data::{generate, GeneratorConfig, SyntheticSample};
use tbava::encoders::{Backbone, BackboneConfig};
use tbava::init::{normal, rng};
use tbava::text_anchor::default_classes;
use tbava::training::{
    batch_schedule, census, encode_prefix, encode_prefixes, forward_full, grad_check, loss, predict_logits,
    read_metrics_csv, sample_grad, tiny_backbone_config, tiny_train_config, train, train_model, write_metrics_csv,
    video_target, Adam, ForwardOptions, GradCheckConfig, Model, Supervision, TrainConfig, TrainMode,
};
use tbava::weights::NamedTensors;
use tbava::{Error, Tape, Tensor};

struct Small {
    backbone: Backbone,
    train: Vec<SyntheticSample>,
    test: Vec<SyntheticSample>,
}

/// Reduced geometry so several runs fit in a unit test.
fn small(seed: u64) -> Small {
    let bc = BackboneConfig {
        n_classes: 3,
        n_layers: 2,
        d_visual: 16,
        d_audio: 16,
        d_text: 16,
        n_visual_tokens: 4,
        n_audio_tokens: 3,
        evidence_width: 8,
        mlp_ratio: 2,
    };
    let backbone = Backbone::init(seed, &bc).unwrap();
    let gen = GeneratorConfig {
        n_classes: 3,
        segments: 4,
        evidence_width: 8,
        seed,
        n_train: 24,
        n_test: 12,
        ..GeneratorConfig::default()
    };
    let (train, test) = generate(&gen, &backbone.codebook).unwrap();
    Small { backbone, train, test }
}

fn small_cfg(mode: TrainMode, steps: usize) -> TrainConfig {
    let mut c = tiny_train_config(mode, 3);
    c.steps = steps;
    c.batch_size = 4;
    c.eval_every = 5;
    c.lr = 1e-2;
    c
}

fn classes() -> Vec<String> {
    default_classes(3)
}

#[test]
fn uniform_logits_give_log_of_class_count() {
    let mut tape = Tape::new();
    let z = tape.input(Tensor::zeros(&[10, 7]));
    let l = loss(&mut tape, z, &[0, 1, 2, 3, 4, 5, 6, 0, 1, 2]).unwrap();
    assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-15);
}

#[test]
fn confident_correct_logits_give_vanishing_loss() {
    let mut tape = Tape::new();
    let mut data = vec![0.0; 2 * 7];
    data[3] = 800.0;
    data[7 + 6] = 800.0;
    let z = tape.input(Tensor::new(vec![2, 7], data).unwrap());
    let l = loss(&mut tape, z, &[3, 6]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-300);
}

#[test]
fn loss_matches_scalar_recomputation() {
    let mut r = rng(5);
    let logits = normal(&[4, 7], 3.0, &mut r);
    let labels = [6, 0, 3, 3];
    let mut tape = Tape::new();
    let z = tape.input(logits.clone());
    let l = loss(&mut tape, z, &labels).unwrap();
    let expect: f64 = logits
        .rows()
        .zip(labels)
        .map(|(row, y)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / 4.0;
    assert!((tape.value(l).data()[0] - expect).abs() < 1e-13);
}

#[test]
fn invalid_label_is_data_error() {
    let mut tape = Tape::new();
    let z = tape.input(Tensor::zeros(&[2, 7]));
    assert!(matches!(loss(&mut tape, z, &[0, 7]), Err(Error::Data(_))));
}

#[test]
fn logits_shape_and_identity_at_init() {
    let s = small(1);
    let full = Model::init(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaFull, 0)).unwrap();
    let base = Model::init(&s.backbone, &classes(), &small_cfg(TrainMode::BackboneOnly, 0)).unwrap();
    assert_eq!(full.head, base.head);
    for sample in &s.test {
        let pf = encode_prefix(&s.backbone, sample, full.prefix_layers(2)).unwrap();
        let pb = encode_prefix(&s.backbone, sample, base.prefix_layers(2)).unwrap();
        let lf = predict_logits(&s.backbone, &full, &pf, ForwardOptions::default()).unwrap();
        let lb = predict_logits(&s.backbone, &base, &pb, ForwardOptions::default()).unwrap();
        assert_eq!(lf.shape(), &[4, 4]);
        assert!(lf.is_finite());
        assert_eq!(lf.to_le_bytes(), lb.to_le_bytes());
    }
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let s = small(2);
    let cfg = small_cfg(TrainMode::TbavaFull, 0);
    let model = Model::init(&s.backbone, &classes(), &cfg).unwrap();
    let out = train_model(&s.backbone, model.clone(), &cfg, &s.train, &s.test).unwrap();
    assert_eq!(out.model, model);
    assert_eq!(out.metrics.len(), 1);
}

#[test]
fn training_never_touches_frozen_weights() {
    let s = small(3);
    let before = s.backbone.weight_digest();
    let out = train(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaFull, 100), &s.train, &s.test).unwrap();
    assert_eq!(s.backbone.weight_digest(), before);
    assert_eq!(out.metrics.len(), 101);
}

#[test]
fn optimizer_moves_exactly_the_census() {
    let s = small(4);
    let cfg = small_cfg(TrainMode::TbavaFull, 3);
    let model = Model::init(&s.backbone, &classes(), &cfg).unwrap();
    let out = train_model(&s.backbone, model.clone(), &cfg, &s.train, &s.test).unwrap();
    let moved: usize = model
        .trainable()
        .iter()
        .zip(out.model.trainable())
        .filter(|((_, a), (_, b))| a != b)
        .count();
    assert_eq!(moved, model.trainable().len());
    assert_eq!(out.model.anchor.frozen_v, model.anchor.frozen_v);
    assert_eq!(out.model.anchor.frozen_a, model.anchor.frozen_a);
    let c = census(&s.backbone, &out.model);
    assert_eq!(c.trainable, model.trainable_count());
}

#[test]
fn runs_are_deterministic() {
    let s = small(5);
    let cfg = small_cfg(TrainMode::TbavaFull, 12);
    let a = train(&s.backbone, &classes(), &cfg, &s.train, &s.test).unwrap();
    let b = train(&s.backbone, &classes(), &cfg, &s.train, &s.test).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model.checkpoint().sha256_hex(), b.model.checkpoint().sha256_hex());
}

#[test]
fn early_loss_trends_down() {
    let s = small(6);
    let out = train(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaFull, 50), &s.train, &s.test).unwrap();
    let losses: Vec<f64> = out.metrics.iter().filter_map(|m| m.loss).collect();
    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "10-step mean loss went from {first} to {last}");
}

#[test]
fn no_gsm_has_fewer_trainable_parameters() {
    let s = small(7);
    let count = |m| Model::init(&s.backbone, &classes(), &small_cfg(m, 0)).unwrap().trainable_count();
    let (base, plain, full) = (count(TrainMode::BackboneOnly), count(TrainMode::TbavaNoGsm), count(TrainMode::TbavaFull));
    assert!(base < plain && plain < full);
    assert_eq!(base, 32 * 4 + 4);
}

#[test]
fn nonfinite_values_abort_training() {
    let s = small(8);
    let cfg = small_cfg(TrainMode::TbavaFull, 5);
    let mut model = Model::init(&s.backbone, &classes(), &cfg).unwrap();
    model.head.w.data_mut().iter_mut().for_each(|v| *v = 1e308);
    let err = train_model(&s.backbone, model, &cfg, &s.train, &s.test).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(_) | Error::Data(_)), "{err}");
}

#[test]
fn adam_first_step_moves_by_lr_against_the_gradient_sign() {
    let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut adam = Adam::new(0.1, &[3]);
    adam.step(vec![&mut p], &[vec![4.0, -0.001, 0.0]]).unwrap();
    let want = [1.0 - 0.1, -2.0 + 0.1, 0.5];
    for (a, b) in p.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let mut bad = Tensor::zeros(&[2]);
    assert!(adam.step(vec![&mut bad], &[vec![0.0; 2]]).is_err());
}

#[test]
fn batch_schedule_covers_each_epoch() {
    let sched = batch_schedule(1, 10, 5, 4);
    let mut first: Vec<usize> = sched[..2].concat();
    first.sort();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
    assert_eq!(sched, batch_schedule(1, 10, 5, 4));
    assert_ne!(sched, batch_schedule(2, 10, 5, 4));
}

#[test]
fn checkpoint_roundtrip_restores_predictions() {
    let s = small(9);
    let cfg = small_cfg(TrainMode::TbavaFull, 6);
    let trained = train(&s.backbone, &classes(), &cfg, &s.train, &s.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    trained.model.checkpoint().save(&stem).unwrap();
    let mut fresh = Model::init(&s.backbone, &classes(), &cfg).unwrap();
    fresh.load_checkpoint(&NamedTensors::load(&stem).unwrap()).unwrap();
    assert_eq!(fresh, trained.model);

    let mut wrong = Model::init(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaNoGsm, 0)).unwrap();
    assert!(wrong.load_checkpoint(&NamedTensors::load(&stem).unwrap()).is_err());
}

#[test]
fn metrics_csv_roundtrips() {
    let s = small(10);
    let out = train(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaNoGsm, 7), &s.train, &s.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_metrics_csv(&p, &out.metrics).unwrap();
    assert_eq!(read_metrics_csv(&p).unwrap(), out.metrics);
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("step,loss,train_acc,test_acc\n"));
}

#[test]
fn soft_prompts_get_gradients_and_frozen_rows_do_not() {
    let s = small(11);
    let model = Model::init(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaFull, 0)).unwrap();
    let mut model = model;
    for t in model.trainable_mut() {
        *t = normal(t.shape(), 0.3, &mut rng(99));
    }
    let prefix = encode_prefix(&s.backbone, &s.train[0], model.prefix_layers(2)).unwrap();
    let mut tape = Tape::new();
    let placed = model.place(&mut tape).unwrap();
    let out = forward_full(&mut tape, &s.backbone, &model, &placed, &prefix, ForwardOptions::default()).unwrap();
    let l = loss(&mut tape, out.logits, &s.train[0].target_indices(3)).unwrap();
    tape.backward(l).unwrap();
    let anchor = placed.anchor.unwrap();
    for soft in [anchor.soft_v.unwrap(), anchor.soft_a.unwrap()] {
        assert!(tape.grad(soft).unwrap().iter().any(|g| *g != 0.0));
    }
    // Frozen encoder rows are constants on the tape.
    for v in tape.vars() {
        if !tape.requires_grad(v) {
            assert!(tape.grad(v).is_none());
        }
    }
}

#[test]
fn sample_gradients_are_ordered_like_the_census() {
    let s = small(12);
    let model = Model::init(&s.backbone, &classes(), &small_cfg(TrainMode::TbavaFull, 0)).unwrap();
    let prefixes = encode_prefixes(&s.backbone, &model, &s.train[..1]).unwrap();
    let g = sample_grad(&s.backbone, &model, &prefixes[0], &s.train[0].target_indices(3)).unwrap();
    for (grad, (name, t)) in g.grads.iter().zip(model.trainable()) {
        assert_eq!(grad.len(), t.numel(), "{name}");
    }
}

#[test]
fn gradient_check_passes_on_tiny_instance() {
    for mode in [TrainMode::TbavaFull, TrainMode::TbavaNoGsm] {
        let report = grad_check(&GradCheckConfig {
            mode,
            ..GradCheckConfig::default()
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        let names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
        assert!(names.iter().all(|n| n.starts_with("adapter") || n.starts_with("soft_prompts") || n.starts_with("head")));
        assert!(!names.iter().any(|n| n.contains("block") || n.contains("codebook")));
    }
}

#[test]
fn gradient_check_catches_a_broken_backward_rule() {
    let report = grad_check(&GradCheckConfig {
        sigmoid_fault: 1.1,
        ..GradCheckConfig::default()
    })
    .unwrap();
    assert!(!report.passed());
    let failing: Vec<&str> = report.failures().iter().map(|p| p.name.as_str()).collect();
    assert!(failing.iter().any(|n| n.contains("gate")), "{failing:?}");
}

#[test]
fn tiny_geometry_is_as_documented() {
    let bc = tiny_backbone_config();
    assert_eq!((bc.n_visual_tokens, bc.n_audio_tokens), (3, 2));
    assert_eq!(tiny_train_config(TrainMode::TbavaFull, 0).adapter.d_bottleneck, 4);
}

#[test]
fn video_target_is_the_single_event_or_background() {
    let s = small(12);
    for v in &s.train {
        let want = v.video_label.iter().next().copied().unwrap_or(3);
        assert_eq!(video_target(v, 3).unwrap(), want);
    }
    let mut two = s.train[0].clone();
    two.video_label = [0, 1].into_iter().collect();
    assert!(matches!(video_target(&two, 3), Err(Error::Data(_))));
}

#[test]
fn video_supervision_trains_from_pooled_logits() {
    let s = small(13);
    let mut cfg = small_cfg(TrainMode::TbavaFull, 50);
    cfg.supervision = Supervision::Video;
    let out = train(&s.backbone, &classes(), &cfg, &s.train, &s.test).unwrap();
    let losses: Vec<f64> = out.metrics.iter().filter_map(|m| m.loss).collect();
    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "10-step mean loss went from {first} to {last}");

    // The objective differs from per-segment training.
    cfg.supervision = Supervision::Segment;
    let seg = train(&s.backbone, &classes(), &cfg, &s.train, &s.test).unwrap();
    assert_ne!(seg.metrics[1].loss, out.metrics[1].loss);
}

#[test]
fn video_loss_is_cross_entropy_of_mean_logits() {
    let s = small(14);
    let cfg = small_cfg(TrainMode::TbavaFull, 0);
    let mut model = Model::init(&s.backbone, &classes(), &cfg).unwrap();
    let mut r = rng(3);
    model.head.w = normal(model.head.w.shape(), 1.0, &mut r);
    let sample = &s.train[0];
    let prefix = encode_prefix(&s.backbone, sample, model.prefix_layers(2)).unwrap();
    let logits = predict_logits(&s.backbone, &model, &prefix, ForwardOptions::default()).unwrap();
    let k = logits.shape()[1];
    let t = logits.shape()[0] as f64;
    let mean: Vec<f64> = (0..k).map(|j| logits.rows().map(|row| row[j]).sum::<f64>() / t).collect();
    let target = video_target(sample, 3).unwrap();
    let lse = mean.iter().map(|x| x.exp()).sum::<f64>().ln();
    let want = lse - mean[target];

    let mut one = cfg.clone();
    one.steps = 1;
    one.batch_size = 1;
    one.supervision = Supervision::Video;
    let out = train_model(&s.backbone, model, &one, &s.train[..1], &s.test).unwrap();
    let got = out.metrics[1].loss.unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}
