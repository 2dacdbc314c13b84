//! Task head, loss, optimizer and the training loop over the frozen stack.
//!
//! Adapters sit after 1-based encoder layers: an adapter "after layer `l`"
//! reads the output of block `l - 1` and feeds block `l`. The frozen prefix
//! before the first adapter does not depend on any trainable value, so it is
//! computed once per sample and reused by every step.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    adapter_forward, AdapterConfig, AdapterMode, AdapterState, AdapterTrace, GateOverride, PlacedAdapter, StreamDims,
};
use crate::autodiff::{Tape, Var};
use crate::data::SyntheticSample;
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::init::{normal, sub_rng};
use crate::tensor::Tensor;
use crate::text_anchor::{AnchorVars, TextAnchor};
use crate::weights::NamedTensors;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    BackboneOnly,
    TbavaNoGsm,
    TbavaFull,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::BackboneOnly, TrainMode::TbavaNoGsm, TrainMode::TbavaFull];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::BackboneOnly => "backbone_only",
            TrainMode::TbavaNoGsm => "tbava_no_gsm",
            TrainMode::TbavaFull => "tbava_full",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode {s:?} (expected backbone_only, tbava_no_gsm or tbava_full)")))
    }

    pub fn adapter_mode(self) -> AdapterMode {
        match self {
            TrainMode::BackboneOnly => AdapterMode::Disabled,
            TrainMode::TbavaNoGsm => AdapterMode::PlainResidual,
            TrainMode::TbavaFull => AdapterMode::FullGsm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// 1-based encoder layers followed by an adapter, increasing.
    pub adapter_layers: Vec<usize>,
    /// Soft-prompt rows per stream.
    pub soft_prompts: usize,
    /// Test accuracy is measured every `eval_every` steps and at the end;
    /// 0 measures only at the end.
    pub eval_every: usize,
    pub supervision: Supervision,
    pub adapter: AdapterConfig,
}

/// What the training loss sees of each sample's labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// One target per segment.
    #[default]
    Segment,
    /// Only the video label: segment logits are mean-pooled before the loss.
    Video,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            mode: TrainMode::TbavaFull,
            adapter_layers: vec![1, 2, 3, 4],
            soft_prompts: 4,
            eval_every: 200,
            supervision: Supervision::Segment,
            adapter: AdapterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.adapter_layers.iter().any(|&l| l == 0 || l > n_layers) {
            return Err(Error::Config(format!(
                "adapter_layers {:?} must lie in 1..={n_layers}",
                self.adapter_layers
            )));
        }
        if self.adapter_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "adapter_layers {:?} must be strictly increasing",
                self.adapter_layers
            )));
        }
        if self.mode != TrainMode::BackboneOnly && self.adapter_layers.is_empty() {
            return Err(Error::Config(format!("mode {} needs at least one adapter layer", self.mode.name())));
        }
        self.adapter.validate()
    }
}

/// Linear classifier over segment-mean visual and audio features.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    /// `[D_v + D_a, n_classes + 1]`
    pub w: Tensor,
    pub b: Tensor,
}

impl TaskHead {
    pub fn init(d_in: usize, n_out: usize, seed: u64) -> TaskHead {
        let mut r = sub_rng(seed, "head");
        TaskHead {
            w: normal(&[d_in, n_out], 0.01, &mut r),
            b: Tensor::zeros(&[n_out]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// Every trainable piece for one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mode: TrainMode,
    pub adapter_layers: Vec<usize>,
    pub adapter_cfg: AdapterConfig,
    /// One per entry of `adapter_layers`; empty for backbone-only.
    pub adapters: Vec<AdapterState>,
    pub anchor: TextAnchor,
    pub head: TaskHead,
}

/// A model placed on a tape.
pub struct PlacedModel {
    pub adapters: Vec<PlacedAdapter>,
    pub anchor: Option<AnchorVars>,
    pub head_w: Var,
    pub head_b: Var,
    /// Trainable vars in [`Model::trainable`] order.
    pub order: Vec<Var>,
}

impl Model {
    pub fn init(backbone: &Backbone, classes: &[String], cfg: &TrainConfig) -> Result<Model> {
        cfg.validate(backbone.config.n_layers)?;
        let bc = &backbone.config;
        let dims = StreamDims {
            visual: bc.d_visual,
            audio: bc.d_audio,
            text: bc.d_text,
        };
        let (adapter_layers, adapters) = if cfg.mode == TrainMode::BackboneOnly {
            (Vec::new(), Vec::new())
        } else {
            let states = cfg
                .adapter_layers
                .iter()
                .map(|&l| AdapterState::init(dims, &cfg.adapter, cfg.mode.adapter_mode(), cfg.seed, l))
                .collect::<Result<Vec<_>>>()?;
            (cfg.adapter_layers.clone(), states)
        };
        Ok(Model {
            mode: cfg.mode,
            adapter_layers,
            adapter_cfg: cfg.adapter.clone(),
            adapters,
            anchor: TextAnchor::build(classes, backbone, cfg.soft_prompts, cfg.seed)?,
            head: TaskHead::init(bc.d_visual + bc.d_audio, bc.n_classes + 1, cfg.seed),
        })
    }

    fn uses_anchor(&self) -> bool {
        self.mode != TrainMode::BackboneOnly
    }

    /// Trainable tensors with names, in optimizer order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (state, layer) in self.adapters.iter().zip(&self.adapter_layers) {
            for (name, t) in state.tensors() {
                out.push((format!("adapter{layer}.{name}"), t));
            }
        }
        if self.uses_anchor() {
            if let Some(s) = &self.anchor.soft_prompts_v {
                out.push(("soft_prompts_v".into(), s));
            }
            if let Some(s) = &self.anchor.soft_prompts_a {
                out.push(("soft_prompts_a".into(), s));
            }
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    /// Mutable view in [`Model::trainable`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for state in &mut self.adapters {
            out.extend(state.tensors_mut());
        }
        if self.mode != TrainMode::BackboneOnly {
            out.extend(self.anchor.soft_prompts_v.as_mut());
            out.extend(self.anchor.soft_prompts_a.as_mut());
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn place<'a>(&'a self, tape: &mut Tape<'a>) -> Result<PlacedModel> {
        let adapters: Vec<PlacedAdapter> = self.adapters.iter().map(|s| s.on_tape(tape, true)).collect();
        let anchor = if self.uses_anchor() {
            Some(self.anchor.on_tape(tape, true)?)
        } else {
            None
        };
        let head_w = tape.param(&self.head.w);
        let head_b = tape.param(&self.head.b);
        let mut order: Vec<Var> = adapters.iter().flat_map(PlacedAdapter::vars).collect();
        if let Some(a) = &anchor {
            order.extend(a.soft_v);
            order.extend(a.soft_a);
        }
        order.extend([head_w, head_b]);
        Ok(PlacedModel {
            adapters,
            anchor,
            head_w,
            head_b,
            order,
        })
    }

    /// Number of frozen blocks applied before the first trainable value.
    pub fn prefix_layers(&self, n_layers: usize) -> usize {
        match self.adapter_layers.first() {
            Some(&l) if self.mode != TrainMode::BackboneOnly => l,
            _ => n_layers,
        }
    }

    pub fn checkpoint(&self) -> NamedTensors {
        let mut out = NamedTensors::default();
        for (name, t) in self.trainable() {
            out.push(name, t.clone());
        }
        out
    }

    pub fn load_checkpoint(&mut self, src: &NamedTensors) -> Result<()> {
        let names: Vec<String> = self.trainable().into_iter().map(|(n, _)| n).collect();
        if src.len() != names.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                src.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(self.trainable_mut()) {
            let shape = slot.shape().to_vec();
            *slot = src.expect(name, &shape)?;
        }
        self.anchor.refresh();
        Ok(())
    }
}

/// Frozen features after the layers that precede every adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPrefix {
    pub layers: usize,
    pub visual: Tensor,
    pub audio: Tensor,
}

pub fn encode_prefix(backbone: &Backbone, sample: &SyntheticSample, layers: usize) -> Result<EncodedPrefix> {
    let (mut v, mut a) = backbone.embed_raw(sample)?;
    for l in 0..layers {
        v = backbone.visual.encode_layer_value(l, &v)?;
        a = backbone.audio.encode_layer_value(l, &a)?;
    }
    Ok(EncodedPrefix {
        layers,
        visual: v,
        audio: a,
    })
}

pub fn encode_prefixes(backbone: &Backbone, model: &Model, samples: &[SyntheticSample]) -> Result<Vec<EncodedPrefix>> {
    let layers = model.prefix_layers(backbone.config.n_layers);
    samples
        .par_iter()
        .map(|s| encode_prefix(backbone, s, layers))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub gate_override: GateOverride,
    pub trace: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            gate_override: GateOverride::None,
            trace: false,
        }
    }
}

pub struct ForwardOutput {
    /// `[T, n_classes + 1]`
    pub logits: Var,
    pub visual: Var,
    pub audio: Var,
    /// One per adapter, when tracing.
    pub traces: Vec<AdapterTrace>,
}

/// Interleaves frozen blocks and adapters from `prefix`, then applies the head.
pub fn forward_full<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a Backbone,
    model: &'a Model,
    placed: &PlacedModel,
    prefix: &EncodedPrefix,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let n_layers = backbone.config.n_layers;
    let mut v = tape.input(prefix.visual.clone());
    let mut a = tape.input(prefix.audio.clone());
    let mode = model.mode.adapter_mode();
    let mut traces = Vec::new();
    let mut next = 0;
    for layer in prefix.layers..=n_layers {
        if layer > prefix.layers {
            v = backbone.visual.encode_layer(tape, layer - 1, v)?;
            a = backbone.audio.encode_layer(tape, layer - 1, a)?;
        }
        while next < model.adapter_layers.len() && model.adapter_layers[next] < layer {
            next += 1;
        }
        if next < model.adapter_layers.len() && model.adapter_layers[next] == layer {
            let anchor = placed
                .anchor
                .ok_or_else(|| Error::Config("adapters need a text anchor".into()))?;
            let out = adapter_forward(
                tape,
                v,
                a,
                anchor.visual,
                anchor.audio,
                &placed.adapters[next],
                &model.adapter_cfg,
                mode,
                opts.gate_override,
            )?;
            v = out.visual;
            a = out.audio;
            if opts.trace {
                traces.extend(out.trace);
            }
            next += 1;
        }
    }
    let pv = tape.mean_tokens(v)?;
    let pa = tape.mean_tokens(a)?;
    let fused = tape.concat(&[pv, pa], 1)?;
    let logits = tape.matmul(fused, placed.head_w)?;
    let logits = tape.add(logits, placed.head_b)?;
    Ok(ForwardOutput {
        logits,
        visual: v,
        audio: a,
        traces,
    })
}

/// Mean per-segment cross-entropy.
pub fn loss(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Logits of one sample as a plain tensor.
pub fn predict_logits(backbone: &Backbone, model: &Model, prefix: &EncodedPrefix, opts: ForwardOptions) -> Result<Tensor> {
    let mut tape = Tape::new();
    let placed = model.place(&mut tape)?;
    let out = forward_full(&mut tape, backbone, model, &placed, prefix, opts)?;
    Ok(tape.value(out.logits).clone())
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                .0
        })
        .collect()
}

/// Per-segment predictions with background mapped to `None`.
pub fn predict(backbone: &Backbone, model: &Model, prefix: &EncodedPrefix) -> Result<Vec<Option<usize>>> {
    let n = backbone.config.n_classes;
    let logits = predict_logits(backbone, model, prefix, ForwardOptions::default())?;
    Ok(argmax_rows(&logits).into_iter().map(|c| (c < n).then_some(c)).collect())
}

/// Segment accuracy over a split.
pub fn evaluate(backbone: &Backbone, model: &Model, prefixes: &[EncodedPrefix], samples: &[SyntheticSample]) -> Result<f64> {
    let n = backbone.config.n_classes;
    let counts = prefixes
        .par_iter()
        .zip(samples)
        .map(|(p, s)| -> Result<(usize, usize)> {
            let logits = predict_logits(backbone, model, p, ForwardOptions::default())?;
            let hits = argmax_rows(&logits)
                .iter()
                .zip(s.target_indices(n))
                .filter(|(p, t)| **p == *t)
                .count();
            Ok((hits, s.n_segments()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hit, total) = counts.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Loss, per-parameter gradients and hit count for one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub hits: usize,
}

pub fn sample_grad(backbone: &Backbone, model: &Model, prefix: &EncodedPrefix, targets: &[usize]) -> Result<SampleGrad> {
    grad_for(backbone, model, prefix, targets, Supervision::Segment)
}

/// Class index of a video's single event, or background for an empty label.
pub fn video_target(sample: &SyntheticSample, n_classes: usize) -> Result<usize> {
    let mut it = sample.video_label.iter();
    match (it.next(), it.next()) {
        (None, _) => Ok(n_classes),
        (Some(&c), None) => Ok(c),
        _ => Err(Error::Data(format!(
            "video supervision needs at most one class per video, got {:?}",
            sample.video_label
        ))),
    }
}

/// Gradient of one sample; `targets` holds one entry per segment, or a
/// single entry under video supervision.
fn grad_for(
    backbone: &Backbone,
    model: &Model,
    prefix: &EncodedPrefix,
    targets: &[usize],
    supervision: Supervision,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let placed = model.place(&mut tape)?;
    let out = forward_full(&mut tape, backbone, model, &placed, prefix, ForwardOptions::default())?;
    let logits = match supervision {
        Supervision::Segment => out.logits,
        Supervision::Video => {
            let t = tape.shape(out.logits)[0];
            let pool = tape.input(Tensor::full(&[1, t], 1.0 / t as f64));
            tape.matmul(pool, out.logits)?
        }
    };
    let hits = argmax_rows(tape.value(logits))
        .iter()
        .zip(targets)
        .filter(|(p, t)| *p == *t)
        .count();
    let l = loss(&mut tape, logits, targets)?;
    let loss_value = tape.value(l).data()[0];
    tape.backward(l)?;
    let grads = placed
        .order
        .iter()
        .map(|&v| tape.take_grad(v).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    Ok(SampleGrad {
        loss: loss_value,
        grads,
        hits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Adam {
        Adam {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if p.numel() != g.len() || m.len() != g.len() {
                return Err(Error::dim("adam", p.shape(), &[g.len()]));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One row of the metrics trace. Step 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    /// Batch-mean loss of this step.
    pub loss: Option<f64>,
    /// Batch accuracy of this step, before the update: per segment, or per
    /// video under video supervision.
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    pub test_acc: f64,
}

/// Fixed-seed sample order: reshuffled every epoch.
pub fn batch_schedule(seed: u64, n: usize, batch: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut r = sub_rng(seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut r);
                order.reverse();
            }
            b.push(order.pop().unwrap());
        }
        out.push(b);
    }
    out
}

/// Trains `model` in place on `train`, reporting test accuracy on `test`.
pub fn train_model(
    backbone: &Backbone,
    mut model: Model,
    cfg: &TrainConfig,
    train: &[SyntheticSample],
    test: &[SyntheticSample],
) -> Result<TrainedModel> {
    cfg.validate(backbone.config.n_layers)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let n = backbone.config.n_classes;
    let train_prefix = encode_prefixes(backbone, &model, train)?;
    let test_prefix = encode_prefixes(backbone, &model, test)?;
    let targets: Vec<Vec<usize>> = match cfg.supervision {
        Supervision::Segment => train.iter().map(|s| s.target_indices(n)).collect(),
        Supervision::Video => train.iter().map(|s| video_target(s, n).map(|c| vec![c])).collect::<Result<_>>()?,
    };
    let sizes: Vec<usize> = model.trainable().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut metrics = vec![MetricRow {
        step: 0,
        loss: None,
        train_acc: None,
        test_acc: Some(evaluate(backbone, &model, &test_prefix, test)?),
    }];
    for (i, batch) in batch_schedule(cfg.seed, train.len(), cfg.batch_size, cfg.steps).iter().enumerate() {
        let step = i + 1;
        let results = batch
            .par_iter()
            .map(|&j| grad_for(backbone, &model, &train_prefix[j], &targets[j], cfg.supervision))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::NonFinite(op) => Error::Data(format!("non-finite value in {op} at step {step}; training aborted")),
                other => other,
            })?;
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&k| vec![0.0; k]).collect();
        let (mut loss_sum, mut hits, mut segs) = (0.0, 0, 0);
        for (r, &j) in results.iter().zip(batch) {
            loss_sum += r.loss;
            hits += r.hits;
            segs += targets[j].len();
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in &mut grads {
            g.iter_mut().for_each(|x| *x *= inv);
        }
        let batch_loss = loss_sum * inv;
        if !batch_loss.is_finite() {
            return Err(Error::Data(format!("loss became {batch_loss} at step {step}; training aborted")));
        }
        adam.step(model.trainable_mut(), &grads)?;
        model.anchor.refresh();
        let eval_now = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        metrics.push(MetricRow {
            step,
            loss: Some(batch_loss),
            train_acc: Some(hits as f64 / segs as f64),
            test_acc: if eval_now {
                Some(evaluate(backbone, &model, &test_prefix, test)?)
            } else {
                None
            },
        });
    }
    let test_acc = metrics.last().and_then(|r| r.test_acc).unwrap_or(0.0);
    Ok(TrainedModel {
        model,
        metrics,
        test_acc,
    })
}

/// Builds a model for `cfg` and trains it.
pub fn train(
    backbone: &Backbone,
    classes: &[String],
    cfg: &TrainConfig,
    train: &[SyntheticSample],
    test: &[SyntheticSample],
) -> Result<TrainedModel> {
    let model = Model::init(backbone, classes, cfg)?;
    train_model(backbone, model, cfg, train, test)
}

// ---- parameter census ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub adapters: usize,
    pub soft_prompts: usize,
    pub head: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub ratio: f64,
}

pub fn census(backbone: &Backbone, model: &Model) -> Census {
    let adapters: usize = model.adapters.iter().map(AdapterState::parameter_count).sum();
    let soft_prompts = if model.uses_anchor() { model.anchor.trainable_count() } else { 0 };
    let head = model.head.parameter_count();
    let trainable = adapters + soft_prompts + head;
    let frozen = backbone.named_tensors().numel();
    let total = trainable + frozen;
    Census {
        adapters,
        soft_prompts,
        head,
        trainable,
        frozen,
        total,
        ratio: trainable as f64 / total as f64,
    }
}

// ---- gradient verification ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tolerance).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub eps: f64,
    pub tolerance: f64,
    /// Scales the sigmoid adjoint; anything but 1 is a broken backward rule.
    pub sigmoid_fault: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            mode: TrainMode::TbavaFull,
            eps: crate::gradcheck::DEFAULT_EPS,
            tolerance: 1e-4,
            sigmoid_fault: 1.0,
        }
    }
}

/// Geometry of the gradient-check instance: two segments, three visual and
/// two audio tokens, bottleneck width four.
pub fn tiny_backbone_config() -> crate::encoders::BackboneConfig {
    crate::encoders::BackboneConfig {
        n_classes: 3,
        n_layers: 2,
        d_visual: 8,
        d_audio: 8,
        d_text: 8,
        n_visual_tokens: 3,
        n_audio_tokens: 2,
        evidence_width: 4,
        mlp_ratio: 2,
    }
}

pub fn tiny_train_config(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        mode,
        adapter_layers: vec![1, 2],
        soft_prompts: 2,
        adapter: AdapterConfig {
            d_bottleneck: 4,
            d_hidden: 4,
            ..AdapterConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Compares every trainable adjoint against central differences on one
/// sample of the tiny instance. Trainable values are redrawn at unit-ish
/// scale first so that zero-initialized projections do not mask any path.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let bc = tiny_backbone_config();
    let backbone = Backbone::init(cfg.seed, &bc)?;
    let classes = crate::text_anchor::default_classes(bc.n_classes);
    let tc = tiny_train_config(cfg.mode, cfg.seed);
    let mut model = Model::init(&backbone, &classes, &tc)?;
    let mut r = sub_rng(cfg.seed, "gradcheck");
    for t in model.trainable_mut() {
        *t = normal(t.shape(), 0.5, &mut r);
    }
    model.anchor.refresh();
    let gen = crate::data::GeneratorConfig {
        n_classes: bc.n_classes,
        segments: 2,
        evidence_width: bc.evidence_width,
        seed: cfg.seed,
        n_train: 1,
        n_test: 1,
        ..crate::data::GeneratorConfig::default()
    };
    let basis = crate::data::EvidenceBasis::new(&gen, &backbone.codebook)?;
    let sample = crate::data::generate_split(&gen, &basis, "gradcheck", 1)?.remove(0);
    let targets = sample.target_indices(bc.n_classes);
    let prefix = encode_prefix(&backbone, &sample, model.prefix_layers(bc.n_layers))?;

    let analytic = {
        let mut tape = Tape::new();
        tape.inject_sigmoid_fault(cfg.sigmoid_fault);
        let placed = model.place(&mut tape)?;
        let out = forward_full(&mut tape, &backbone, &model, &placed, &prefix, ForwardOptions::default())?;
        let l = loss(&mut tape, out.logits, &targets)?;
        tape.backward(l)?;
        placed
            .order
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect::<Vec<_>>()
    };
    let loss_at = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let placed = m.place(&mut tape)?;
        let out = forward_full(&mut tape, &backbone, m, &placed, &prefix, ForwardOptions::default())?;
        let l = loss(&mut tape, out.logits, &targets)?;
        Ok(tape.value(l).data()[0])
    };
    let names: Vec<String> = model.trainable().into_iter().map(|(n, _)| n).collect();
    let mut params = Vec::with_capacity(names.len());
    for (i, name) in names.into_iter().enumerate() {
        let numel = analytic[i].len();
        let mut worst = 0.0f64;
        for j in 0..numel {
            let orig = model.trainable_mut()[i].data()[j];
            model.trainable_mut()[i].data_mut()[j] = orig + cfg.eps;
            let up = loss_at(&model)?;
            model.trainable_mut()[i].data_mut()[j] = orig - cfg.eps;
            let down = loss_at(&model)?;
            model.trainable_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            worst = worst.max(crate::gradcheck::relative_error(analytic[i][j], numeric));
        }
        params.push(ParamCheck {
            name,
            numel,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params,
    })
}
