//! Synthetic audio-visual event data with off-screen and silent ambiguity.
//!
//! Every video has one event class `c` and one distractor `d != c`. Each
//! segment is first drawn as background (no event) or event; an event
//! segment is then off-screen (audio says `c`, video shows `d`), silent
//! (video shows `c`, audio is noise) or clean (both carry `c`). Only clean
//! segments are labeled with `c`: an event must be audible and visible.
//!
//! Class evidence is `codebook[c] . M_modality + N(0, noise_sigma^2)` where
//! the codebook is the backbone's and `M_modality` is a frozen mixing map.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init::{orthogonal, standard_normal, sub_rng, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentFlag {
    Clean,
    OffscreenSound,
    SilentEntity,
    Background,
}

impl SegmentFlag {
    pub fn is_ambiguous(self) -> bool {
        matches!(self, SegmentFlag::OffscreenSound | SegmentFlag::SilentEntity)
    }
}

/// What each modality carries in one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTrace {
    pub flag: SegmentFlag,
    pub visual_class: Option<usize>,
    pub audio_class: Option<usize>,
}

impl SegmentTrace {
    /// The segment label implied by the trace: a class only when both
    /// modalities carry it.
    pub fn label(&self) -> Option<usize> {
        match (self.visual_class, self.audio_class) {
            (Some(v), Some(a)) if v == a => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[T, D_e]`
    pub visual_evidence: Tensor,
    /// `[T, D_e]`
    pub audio_evidence: Tensor,
    /// Per-segment class, `None` for background.
    pub segment_label: Vec<Option<usize>>,
    pub trace: Vec<SegmentTrace>,
    pub video_label: BTreeSet<usize>,
}

impl SyntheticSample {
    pub fn n_segments(&self) -> usize {
        self.segment_label.len()
    }

    /// Labels as head indices, with background mapped to `n_classes`.
    pub fn target_indices(&self, n_classes: usize) -> Vec<usize> {
        self.segment_label.iter().map(|l| l.unwrap_or(n_classes)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub segments: usize,
    pub evidence_width: usize,
    /// Probability that a segment has no event at all.
    pub p_background: f64,
    /// Among event segments: audio-only with an off-screen source.
    pub p_offscreen: f64,
    /// Among event segments: visible but silent.
    pub p_silent: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_classes: 6,
            segments: 10,
            evidence_width: 32,
            p_background: 0.2,
            p_offscreen: 0.2,
            p_silent: 0.2,
            noise_sigma: 0.5,
            seed: 0,
            n_train: 800,
            n_test: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_background", self.p_background),
            ("p_offscreen", self.p_offscreen),
            ("p_silent", self.p_silent),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_offscreen + self.p_silent > 1.0 {
            return Err(Error::Config(format!(
                "p_offscreen + p_silent = {} exceeds 1",
                self.p_offscreen + self.p_silent
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma = {} is invalid", self.noise_sigma)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes for distractors".into()));
        }
        if self.segments == 0 || self.evidence_width == 0 {
            return Err(Error::Config("segments and evidence_width must be positive".into()));
        }
        Ok(())
    }
}

/// Class prototypes mapped into each modality's evidence space.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceBasis {
    /// `[n_classes, D_e]`
    pub visual: Tensor,
    /// `[n_classes, D_e]`
    pub audio: Tensor,
}

impl EvidenceBasis {
    /// `codebook . M` for frozen mixing maps drawn from the generator seed.
    pub fn new(cfg: &GeneratorConfig, codebook: &Tensor) -> Result<EvidenceBasis> {
        let s = codebook.shape();
        if s.len() != 2 || s[0] != cfg.n_classes {
            return Err(Error::Config(format!(
                "codebook {s:?} does not have {} class rows",
                cfg.n_classes
            )));
        }
        for (c, row) in codebook.rows().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("codebook row {c} has norm {norm}, expected 1")));
            }
        }
        let d = s[1];
        // Mixing maps keep the average prototype norm near one.
        let gain = (d as f64 / cfg.evidence_width as f64).sqrt();
        let mut r = sub_rng(cfg.seed, "mixing");
        let mv = orthogonal(d, cfg.evidence_width, gain, &mut r);
        let ma = orthogonal(d, cfg.evidence_width, gain, &mut r);
        let project = |m: &Tensor| {
            let mut out = vec![0.0; cfg.n_classes * cfg.evidence_width];
            crate::autodiff::gemm(cfg.n_classes, d, cfg.evidence_width, codebook.data(), false, m.data(), false, &mut out, 0.0);
            Tensor::from_parts(vec![cfg.n_classes, cfg.evidence_width], out)
        };
        Ok(EvidenceBasis {
            visual: project(&mv),
            audio: project(&ma),
        })
    }

    fn row(t: &Tensor, c: usize) -> &[f64] {
        let w = t.last_dim();
        &t.data()[c * w..(c + 1) * w]
    }

    /// Nearest of {zero} and the class prototypes, `None` meaning the zero
    /// (no-event) prototype.
    pub fn decode(prototypes: &Tensor, x: &[f64]) -> Option<usize> {
        let null: f64 = x.iter().map(|v| v * v).sum();
        let mut best = (None, null);
        for (c, p) in prototypes.rows().enumerate() {
            let d: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (Some(c), d);
            }
        }
        best.0
    }
}

/// Generates `count` videos from the stream labeled `split`.
pub fn generate_split(cfg: &GeneratorConfig, basis: &EvidenceBasis, split: &str, count: usize) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut r = sub_rng(cfg.seed, split);
    Ok((0..count).map(|_| generate_one(cfg, basis, &mut r)).collect())
}

/// The train and test splits of `cfg`.
pub fn generate(cfg: &GeneratorConfig, codebook: &Tensor) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    cfg.validate()?;
    let basis = EvidenceBasis::new(cfg, codebook)?;
    Ok((
        generate_split(cfg, &basis, "train", cfg.n_train)?,
        generate_split(cfg, &basis, "test", cfg.n_test)?,
    ))
}

fn generate_one(cfg: &GeneratorConfig, basis: &EvidenceBasis, r: &mut Rng) -> SyntheticSample {
    let (t, w) = (cfg.segments, cfg.evidence_width);
    let event = r.gen_range(0..cfg.n_classes);
    let distractor = (event + r.gen_range(1..cfg.n_classes)) % cfg.n_classes;
    let mut visual = Vec::with_capacity(t * w);
    let mut audio = Vec::with_capacity(t * w);
    let mut trace = Vec::with_capacity(t);
    for _ in 0..t {
        let flag = if r.gen::<f64>() < cfg.p_background {
            SegmentFlag::Background
        } else {
            let u = r.gen::<f64>();
            if u < cfg.p_offscreen {
                SegmentFlag::OffscreenSound
            } else if u < cfg.p_offscreen + cfg.p_silent {
                SegmentFlag::SilentEntity
            } else {
                SegmentFlag::Clean
            }
        };
        let (vc, ac) = match flag {
            SegmentFlag::Clean => (Some(event), Some(event)),
            SegmentFlag::OffscreenSound => (Some(distractor), Some(event)),
            SegmentFlag::SilentEntity => (Some(event), None),
            SegmentFlag::Background => (None, None),
        };
        for (buf, protos, class) in [(&mut visual, &basis.visual, vc), (&mut audio, &basis.audio, ac)] {
            let proto = class.map(|c| EvidenceBasis::row(protos, c));
            for j in 0..w {
                let signal = proto.map_or(0.0, |p| p[j]);
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * standard_normal(r)
                } else {
                    0.0
                };
                buf.push(signal + noise);
            }
        }
        trace.push(SegmentTrace {
            flag,
            visual_class: vc,
            audio_class: ac,
        });
    }
    let segment_label: Vec<Option<usize>> = trace.iter().map(SegmentTrace::label).collect();
    let video_label = segment_label.iter().flatten().copied().collect();
    SyntheticSample {
        visual_evidence: Tensor::from_parts(vec![t, w], visual),
        audio_evidence: Tensor::from_parts(vec![t, w], audio),
        segment_label,
        trace,
        video_label,
    }
}

// ---- reference decoders -----------------------------------------------------

/// Per-segment rule that predicts `c` only when both modalities decode to `c`.
pub fn bayes_oracle(basis: &EvidenceBasis, sample: &SyntheticSample) -> Vec<Option<usize>> {
    sample
        .visual_evidence
        .rows()
        .zip(sample.audio_evidence.rows())
        .map(|(v, a)| {
            match (EvidenceBasis::decode(&basis.visual, v), EvidenceBasis::decode(&basis.audio, a)) {
                (Some(x), Some(y)) if x == y => Some(x),
                _ => None,
            }
        })
        .collect()
}

/// Binds whatever is active: predicts a class when either modality decodes
/// to one (audio first), regardless of agreement.
pub fn cooccurrence_classifier(basis: &EvidenceBasis, sample: &SyntheticSample) -> Vec<Option<usize>> {
    sample
        .visual_evidence
        .rows()
        .zip(sample.audio_evidence.rows())
        .map(|(v, a)| EvidenceBasis::decode(&basis.audio, a).or_else(|| EvidenceBasis::decode(&basis.visual, v)))
        .collect()
}

/// Segment accuracy of `predict` over `samples`, optionally restricted to
/// segments whose flag passes `keep`.
pub fn segment_accuracy(
    samples: &[SyntheticSample],
    predict: impl Fn(&SyntheticSample) -> Vec<Option<usize>>,
    keep: impl Fn(SegmentFlag) -> bool,
) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        for ((p, l), tr) in predict(s).iter().zip(&s.segment_label).zip(&s.trace) {
            if keep(tr.flag) {
                total += 1;
                hit += usize::from(p == l);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

// ---- line-delimited export --------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Record {
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
    trace: Vec<SegmentTrace>,
    video_label: Vec<usize>,
}

impl From<&SyntheticSample> for Record {
    fn from(s: &SyntheticSample) -> Self {
        let rows = |t: &Tensor| t.rows().map(<[f64]>::to_vec).collect();
        Record {
            visual: rows(&s.visual_evidence),
            audio: rows(&s.audio_evidence),
            labels: s.segment_label.clone(),
            trace: s.trace.clone(),
            video_label: s.video_label.iter().copied().collect(),
        }
    }
}

impl Record {
    fn into_sample(self, line: usize) -> Result<SyntheticSample> {
        let bad = |msg: String| Error::Data(format!("record {line}: {msg}"));
        let t = self.labels.len();
        if t == 0 || self.trace.len() != t || self.visual.len() != t || self.audio.len() != t {
            return Err(bad("segment counts disagree".into()));
        }
        let w = self.visual[0].len();
        let flatten = |rows: Vec<Vec<f64>>| -> Result<Tensor> {
            if w == 0 || rows.iter().any(|r| r.len() != w) {
                return Err(bad("ragged evidence rows".into()));
            }
            Tensor::new(vec![t, w], rows.into_iter().flatten().collect())
        };
        let derived: Vec<Option<usize>> = self.trace.iter().map(SegmentTrace::label).collect();
        if derived != self.labels {
            return Err(bad("labels disagree with trace".into()));
        }
        Ok(SyntheticSample {
            visual_evidence: flatten(self.visual)?,
            audio_evidence: flatten(self.audio)?,
            segment_label: self.labels,
            trace: self.trace,
            video_label: self.video_label.into_iter().collect(),
        })
    }
}

pub fn write_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&Record::from(s)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.into_sample(i + 1)?);
    }
    Ok(out)
}

/// SHA-256 over evidence bytes, labels and flags.
pub fn dataset_digest(samples: &[SyntheticSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.visual_evidence.to_le_bytes());
        h.update(s.audio_evidence.to_le_bytes());
        for (l, tr) in s.segment_label.iter().zip(&s.trace) {
            h.update((l.map_or(u64::MAX, |c| c as u64)).to_le_bytes());
            h.update([tr.flag as u8]);
        }
    }
    format!("{:x}", h.finalize())
}
