//! Experiment configuration, the three-mode ablation and gate heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::GatePair;
use crate::autodiff::Tape;
use crate::data::{bayes_oracle, generate, segment_accuracy, EvidenceBasis, GeneratorConfig, SyntheticSample};
use crate::encoders::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::text_anchor::default_classes;
use crate::training::{
    census, csv_error, encode_prefixes, forward_full, train, write_metrics_csv, ForwardOptions, Model, TrainConfig,
    TrainMode, TrainedModel,
};

/// Everything one run needs. `seed` drives the backbone, the data and the
/// trainable initialization; the per-section seeds are overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub data: GeneratorConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            data: GeneratorConfig::default(),
            train: TrainConfig::default(),
        }
        .with_seed(0)
    }
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.train.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.validate()?;
        if self.data.n_classes != self.backbone.n_classes || self.data.evidence_width != self.backbone.evidence_width {
            return Err(Error::Config(format!(
                "data ({} classes, width {}) does not match backbone ({} classes, width {})",
                self.data.n_classes, self.data.evidence_width, self.backbone.n_classes, self.backbone.evidence_width
            )));
        }
        self.train.validate(self.backbone.n_layers)
    }

    /// Parses TOML text after applying `key.path=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as TOML and falls back to a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override key {key:?} passes through a non-table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Backbone and data splits for one seed.
pub struct World {
    pub backbone: Backbone,
    pub basis: EvidenceBasis,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let backbone = Backbone::init(cfg.seed, &cfg.backbone)?;
    let basis = EvidenceBasis::new(&cfg.data, &backbone.codebook)?;
    let (train, test) = generate(&cfg.data, &backbone.codebook)?;
    Ok(World {
        backbone,
        basis,
        train,
        test,
    })
}

pub fn run_one(world: &World, cfg: &ExperimentConfig, classes: &[String]) -> Result<TrainedModel> {
    train(&world.backbone, classes, &cfg.train, &world.train, &world.test)
}

// ---- ablation ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub mode: TrainMode,
    pub test_acc: f64,
    /// Test accuracy of the untrained model.
    pub step0_acc: f64,
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
    /// Accuracy of the agreement oracle on the same test split.
    pub oracle_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: TrainMode,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub trainable: usize,
    pub ratio: f64,
}

impl AblationReport {
    pub fn summary(&self, mode: TrainMode) -> Option<ModeSummary> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.mode == mode).collect();
        let first = rows.first()?;
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.test_acc).sum::<f64>() / n;
        let var = if rows.len() > 1 {
            rows.iter().map(|r| (r.test_acc - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(ModeSummary {
            mode,
            mean,
            std: var.sqrt(),
            trainable: first.trainable,
            ratio: first.ratio,
        })
    }

    pub fn oracle_mean(&self) -> f64 {
        let per_seed: BTreeMap<u64, f64> = self.rows.iter().map(|r| (r.seed, r.oracle_acc)).collect();
        per_seed.values().sum::<f64>() / per_seed.len().max(1) as f64
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(s, "seeds: {}", seeds.join(", ")).unwrap();
        writeln!(s, "{:<14} {:>16} {:>10} {:>9}", "mode", "test acc (%)", "trainable", "ratio (%)").unwrap();
        for mode in TrainMode::ALL {
            if let Some(m) = self.summary(mode) {
                writeln!(
                    s,
                    "{:<14} {:>8.2} ± {:<5.2} {:>10} {:>9.3}",
                    mode.name(),
                    100.0 * m.mean,
                    100.0 * m.std,
                    m.trainable,
                    100.0 * m.ratio
                )
                .unwrap();
            }
        }
        writeln!(s, "{:<14} {:>8.2}", "bayes_oracle", 100.0 * self.oracle_mean()).unwrap();
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<AblationReport> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let rows: Vec<AblationRow> = r
            .deserialize()
            .map(|row| row.map_err(|e| csv_error(path, e)))
            .collect::<Result<_>>()?;
        let mut seeds: Vec<u64> = Vec::new();
        for row in &rows {
            if !seeds.contains(&row.seed) {
                seeds.push(row.seed);
            }
        }
        Ok(AblationReport { seeds, rows })
    }
}

/// Trains every mode on every seed, each seed's modes sharing one backbone
/// and one data split. With `out`, writes `ablation.csv` and one metrics
/// trace per run.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let classes = default_classes(cfg.backbone.n_classes);
    let mut rows = Vec::with_capacity(3 * seeds.len());
    for &seed in seeds {
        let base = cfg.clone().with_seed(seed);
        let world = build_world(&base)?;
        let oracle_acc = segment_accuracy(&world.test, |s| bayes_oracle(&world.basis, s), |_| true);
        for mode in TrainMode::ALL {
            let run_cfg = base.clone().with_mode(mode);
            let trained = run_one(&world, &run_cfg, &classes)?;
            if let Some(dir) = out {
                write_metrics_csv(&dir.join(format!("metrics_{}_seed{seed}.csv", mode.name())), &trained.metrics)?;
            }
            let c = census(&world.backbone, &trained.model);
            rows.push(AblationRow {
                seed,
                mode,
                test_acc: trained.test_acc,
                step0_acc: trained.metrics[0].test_acc.unwrap_or(f64::NAN),
                trainable: c.trainable,
                total: c.total,
                ratio: c.ratio,
                oracle_acc,
            });
        }
    }
    let report = AblationReport {
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(dir) = out {
        report.write_csv(&dir.join("ablation.csv"))?;
    }
    Ok(report)
}

// ---- gate heatmaps ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStream {
    Visual,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Cross,
    Text,
}

/// Mean gate values, `values[channel][class]`, for one stream and gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateHeatmap {
    /// Adapter layer, or `None` for the mean over layers.
    pub layer: Option<usize>,
    pub stream: GateStream,
    pub kind: GateKind,
    pub classes: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Dominant ground-truth class of a video: the most frequent labeled class,
/// lowest index on ties.
pub fn dominant_class(sample: &SyntheticSample) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in sample.segment_label.iter().flatten() {
        *counts.entry(*c).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(usize, usize)>, (c, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
}

/// Averages every emitted gate over test videos grouped by dominant class.
/// Classes with no video are left out of the columns.
pub fn inspect_gates(backbone: &Backbone, model: &Model, samples: &[SyntheticSample]) -> Result<Vec<GateHeatmap>> {
    if model.mode != TrainMode::TbavaFull {
        return Err(Error::Usage(format!(
            "gate inspection needs a tbava_full model, got {}",
            model.mode.name()
        )));
    }
    let n_layers = model.adapter_layers.len();
    let db = model.adapter_cfg.d_bottleneck;
    let n_classes = backbone.config.n_classes;
    // sums[layer][stream*2 + kind][class][channel]
    let mut sums = vec![vec![vec![vec![0.0; db]; n_classes]; 4]; n_layers];
    let mut counts = vec![0usize; n_classes];
    let prefixes = encode_prefixes(backbone, model, samples)?;
    for (sample, prefix) in samples.iter().zip(&prefixes) {
        let Some(class) = dominant_class(sample) else { continue };
        counts[class] += 1;
        let mut tape = Tape::new();
        let placed = model.place(&mut tape)?;
        let opts = ForwardOptions {
            trace: true,
            ..ForwardOptions::default()
        };
        let out = forward_full(&mut tape, backbone, model, &placed, prefix, opts)?;
        for (l, tr) in out.traces.iter().enumerate() {
            let pairs: [Option<GatePair>; 2] = [tr.gates_v, tr.gates_a];
            for (s, pair) in pairs.iter().enumerate() {
                let pair = pair.ok_or_else(|| Error::Config("gated adapter emitted no gates".into()))?;
                for (k, v) in [pair.w_cross, pair.w_text].into_iter().enumerate() {
                    for (acc, x) in sums[l][2 * s + k][class].iter_mut().zip(tape.value(v).data()) {
                        *acc += x;
                    }
                }
            }
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::Data("no labeled video to group gates by".into()));
    }
    let names = &model.anchor.class_names;
    let classes: Vec<String> = present.iter().map(|&c| names[c].clone()).collect();
    let mut maps = Vec::new();
    let combos = [
        (GateStream::Visual, GateKind::Cross),
        (GateStream::Visual, GateKind::Text),
        (GateStream::Audio, GateKind::Cross),
        (GateStream::Audio, GateKind::Text),
    ];
    let matrix = |l: usize, i: usize| -> Vec<Vec<f64>> {
        (0..db)
            .map(|ch| present.iter().map(|&c| sums[l][i][c][ch] / counts[c] as f64).collect())
            .collect()
    };
    for (l, &layer) in model.adapter_layers.iter().enumerate() {
        for (i, &(stream, kind)) in combos.iter().enumerate() {
            maps.push(GateHeatmap {
                layer: Some(layer),
                stream,
                kind,
                classes: classes.clone(),
                values: matrix(l, i),
            });
        }
    }
    for (i, &(stream, kind)) in combos.iter().enumerate() {
        let per_layer: Vec<Vec<Vec<f64>>> = (0..n_layers).map(|l| matrix(l, i)).collect();
        let values = (0..db)
            .map(|ch| {
                (0..present.len())
                    .map(|j| per_layer.iter().map(|m| m[ch][j]).sum::<f64>() / n_layers as f64)
                    .collect()
            })
            .collect();
        maps.push(GateHeatmap {
            layer: None,
            stream,
            kind,
            classes: classes.clone(),
            values,
        });
    }
    Ok(maps)
}

/// File name holding the heatmaps of one layer (or the layer mean).
pub fn heatmap_file_name(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("gates_layer{l}.csv"),
        None => "gates_layer_mean.csv".into(),
    }
}

/// Writes one CSV per layer plus the layer mean. Each file stacks the four
/// matrices with `stream,gate,channel` leading columns and one column per
/// class.
pub fn write_heatmaps(dir: &Path, maps: &[GateHeatmap]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers: Vec<Option<usize>> = Vec::new();
    for m in maps {
        if !layers.contains(&m.layer) {
            layers.push(m.layer);
        }
    }
    let mut written = Vec::new();
    for layer in layers {
        let path = dir.join(heatmap_file_name(layer));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let group: Vec<&GateHeatmap> = maps.iter().filter(|m| m.layer == layer).collect();
        let mut header = vec!["stream".to_string(), "gate".into(), "channel".into()];
        header.extend(group[0].classes.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for m in group {
            for (ch, row) in m.values.iter().enumerate() {
                let mut rec = vec![stream_name(m.stream).to_string(), kind_name(m.kind).into(), ch.to_string()];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a file written by [`write_heatmaps`].
pub fn read_heatmaps(path: &Path, layer: Option<usize>) -> Result<Vec<GateHeatmap>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 4 || &header[0] != "stream" || &header[1] != "gate" || &header[2] != "channel" {
        return Err(Error::Data(format!("{}: not a gate heatmap", path.display())));
    }
    let classes: Vec<String> = header.iter().skip(3).map(String::from).collect();
    let mut maps: Vec<GateHeatmap> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = || Error::Data(format!("{}: malformed heatmap row", path.display()));
        let stream = match &rec[0] {
            "visual" => GateStream::Visual,
            "audio" => GateStream::Audio,
            _ => return Err(bad()),
        };
        let kind = match &rec[1] {
            "cross" => GateKind::Cross,
            "text" => GateKind::Text,
            _ => return Err(bad()),
        };
        let row = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        match maps.iter_mut().find(|m| m.stream == stream && m.kind == kind) {
            Some(m) => m.values.push(row),
            None => maps.push(GateHeatmap {
                layer,
                stream,
                kind,
                classes: classes.clone(),
                values: vec![row],
            }),
        }
    }
    Ok(maps)
}

pub fn stream_name(s: GateStream) -> &'static str {
    match s {
        GateStream::Visual => "visual",
        GateStream::Audio => "audio",
    }
}

pub fn kind_name(k: GateKind) -> &'static str {
    match k {
        GateKind::Cross => "cross",
        GateKind::Text => "text",
    }
}
