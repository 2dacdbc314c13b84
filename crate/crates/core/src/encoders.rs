//! Frozen toy transformer encoders for the visual, audio and text streams.
//!
//! Weights come from a seed and are never registered as trainable leaves:
//! every block enters the tape through [`Tape::constant`], so gradients flow
//! through the blocks to their inputs but never into them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::init::{gram_schmidt, normal, orthogonal, sub_rng};
use crate::tensor::Tensor;
use crate::weights::NamedTensors;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub n_layers: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    /// Tokens produced per segment by the patch expansion (unused for text).
    pub n_tokens: usize,
    /// Width of the raw evidence vectors (unused for text).
    pub input_width: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let name = self.modality.name();
        if self.n_layers == 0 {
            return Err(Error::Config(format!("{name} encoder needs n_layers >= 1")));
        }
        if self.d_model == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(format!("{name} encoder dims must be positive")));
        }
        if self.modality != Modality::Text && (self.n_tokens == 0 || self.input_width == 0) {
            return Err(Error::Config(format!("{name} encoder needs n_tokens and input_width > 0")));
        }
        Ok(())
    }
}

/// Geometry of all three encoders plus the shared class codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_classes: usize,
    pub n_layers: usize,
    pub d_visual: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub n_visual_tokens: usize,
    pub n_audio_tokens: usize,
    pub evidence_width: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_classes: 6,
            n_layers: 4,
            d_visual: 64,
            d_audio: 64,
            d_text: 64,
            n_visual_tokens: 17,
            n_audio_tokens: 8,
            evidence_width: 32,
            mlp_ratio: 2,
        }
    }
}

impl BackboneConfig {
    pub fn encoder(&self, modality: Modality) -> EncoderConfig {
        let (d_model, n_tokens, input_width) = match modality {
            Modality::Visual => (self.d_visual, self.n_visual_tokens, self.evidence_width),
            Modality::Audio => (self.d_audio, self.n_audio_tokens, self.evidence_width),
            Modality::Text => (self.d_text, 0, 0),
        };
        EncoderConfig {
            modality,
            n_layers: self.n_layers,
            d_model,
            mlp_hidden: self.mlp_ratio * d_model,
            n_tokens,
            input_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        for m in [Modality::Visual, Modality::Audio, Modality::Text] {
            self.encoder(m).validate()?;
        }
        // Codebook rows and the two template offsets share one orthonormal basis.
        if self.n_classes + 2 > self.d_text {
            return Err(Error::Config(format!(
                "d_text = {} cannot hold {} classes plus two template directions",
                self.d_text, self.n_classes
            )));
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn init(d: usize, hidden: usize, n_layers: usize, seed: u64, label: &str) -> Block {
        let mut r = sub_rng(seed, label);
        // Residual branches are damped so depth does not swamp the input.
        let branch_gain = 1.0 / (2.0 * n_layers as f64).sqrt();
        Block {
            wq: orthogonal(d, d, 1.0, &mut r),
            wk: orthogonal(d, d, 1.0, &mut r),
            wv: orthogonal(d, d, 1.0, &mut r),
            wo: orthogonal(d, d, branch_gain, &mut r),
            w1: orthogonal(d, hidden, 1.0, &mut r),
            b1: Tensor::zeros(&[hidden]),
            w2: orthogonal(hidden, d, branch_gain, &mut r),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self, prefix: &str, out: &mut NamedTensors) {
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            out.push(format!("{prefix}.{name}"), t.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub layers: Vec<Block>,
    /// `[input_width, n_tokens * d_model]` patch expansion (visual/audio).
    pub patch: Option<Tensor>,
    /// `[n_tokens, d_model]` positional offsets (visual/audio).
    pub positions: Option<Tensor>,
}

impl EncoderStack {
    pub fn init(seed: u64, config: &EncoderConfig) -> Result<EncoderStack> {
        config.validate()?;
        let name = config.modality.name();
        let layers = (0..config.n_layers)
            .map(|l| {
                Block::init(
                    config.d_model,
                    config.mlp_hidden,
                    config.n_layers,
                    seed,
                    &format!("{name}.block{l}"),
                )
            })
            .collect();
        let (patch, positions) = if config.modality == Modality::Text {
            (None, None)
        } else {
            let mut r = sub_rng(seed, &format!("{name}.embed"));
            let width = config.n_tokens * config.d_model;
            let patch = normal(&[config.input_width, width], (1.0 / config.input_width as f64).sqrt(), &mut r);
            let positions = normal(&[config.n_tokens, config.d_model], 0.1, &mut r);
            (Some(patch), Some(positions))
        };
        Ok(EncoderStack {
            config: config.clone(),
            layers,
            patch,
            positions,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Applies block `layer` to `x: [S, N, D]`; self-attention runs within
    /// each of the `S` groups. A rank-2 `[N, D]` input is one group.
    pub fn encode_layer<'a>(&'a self, tape: &mut Tape<'a>, layer: usize, x: Var) -> Result<Var> {
        let block = self.layers.get(layer).ok_or(Error::Index {
            what: "encoder layer",
            index: layer,
            len: self.layers.len(),
        })?;
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.config.d_model) || !(2..=3).contains(&shape.len()) {
            return Err(Error::dim("encode_layer", &shape, &[self.config.d_model]));
        }
        let h = if shape.len() == 2 {
            tape.reshape(x, &[1, shape[0], shape[1]])?
        } else {
            x
        };
        let d = self.config.d_model;
        let [wq, wk, wv, wo, w1, b1, w2, b2] = [
            &block.wq, &block.wk, &block.wv, &block.wo, &block.w1, &block.b1, &block.w2, &block.b2,
        ]
        .map(|w| tape.constant(w));

        let n = tape.layer_norm(h, LN_EPS)?;
        let q = tape.matmul(n, wq)?;
        let k = tape.matmul(n, wk)?;
        let v = tape.matmul(n, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.matmul(ctx, wo)?;
        let h = tape.add(h, ctx)?;

        let n = tape.layer_norm(h, LN_EPS)?;
        let m = tape.matmul(n, w1)?;
        let m = tape.add(m, b1)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, w2)?;
        let m = tape.add(m, b2)?;
        let out = tape.add(h, m)?;

        if shape.len() == 2 {
            tape.reshape(out, &shape)
        } else {
            Ok(out)
        }
    }

    /// Tape-free convenience wrapper around [`EncoderStack::encode_layer`].
    pub fn encode_layer_value(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = self.encode_layer(&mut tape, layer, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Layer-0 tokens `[T, N, D]` from per-segment evidence `[T, input_width]`.
    pub fn embed_evidence(&self, evidence: &Tensor) -> Result<Tensor> {
        let (Some(patch), Some(pos)) = (&self.patch, &self.positions) else {
            return Err(Error::Config(format!(
                "{} encoder has no evidence embedding",
                self.config.modality.name()
            )));
        };
        let s = evidence.shape();
        if s.len() != 2 || s[1] != self.config.input_width {
            return Err(Error::Config(format!(
                "{} evidence must be [T, {}], got {s:?}",
                self.config.modality.name(),
                self.config.input_width
            )));
        }
        let (t, n, d) = (s[0], self.config.n_tokens, self.config.d_model);
        let mut out = vec![0.0; t * n * d];
        crate::autodiff::gemm(t, self.config.input_width, n * d, evidence.data(), false, patch.data(), false, &mut out, 0.0);
        for seg in out.chunks_exact_mut(n * d) {
            for (o, &p) in seg.iter_mut().zip(pos.data()) {
                *o += p;
            }
        }
        Ok(Tensor::from_parts(vec![t, n, d], out))
    }

    pub fn named_tensors(&self, out: &mut NamedTensors) {
        let name = self.config.modality.name();
        for (l, block) in self.layers.iter().enumerate() {
            block.named(&format!("{name}.block{l}"), out);
        }
        if let Some(p) = &self.patch {
            out.push(format!("{name}.patch"), p.clone());
        }
        if let Some(p) = &self.positions {
            out.push(format!("{name}.positions"), p.clone());
        }
    }
}

/// The three frozen encoders plus the class codebook they share.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub seed: u64,
    pub visual: EncoderStack,
    pub audio: EncoderStack,
    pub text: EncoderStack,
    /// `[n_classes, d_text]` unit-norm class prototypes.
    pub codebook: Tensor,
    /// `[2, d_text]` unit-norm template directions for the visual ("a video
    /// of") and audio ("a sound of") prompts, orthogonal to the codebook.
    pub templates: Tensor,
}

impl Backbone {
    pub fn init(seed: u64, config: &BackboneConfig) -> Result<Backbone> {
        config.validate()?;
        let visual = EncoderStack::init(seed, &config.encoder(Modality::Visual))?;
        let audio = EncoderStack::init(seed, &config.encoder(Modality::Audio))?;
        let text = EncoderStack::init(seed, &config.encoder(Modality::Text))?;
        let mut r = sub_rng(seed, "codebook");
        let basis = gram_schmidt(config.n_classes + 2, config.d_text, &mut r);
        let split = config.n_classes * config.d_text;
        Ok(Backbone {
            config: config.clone(),
            seed,
            visual,
            audio,
            text,
            codebook: Tensor::from_parts(vec![config.n_classes, config.d_text], basis[..split].to_vec()),
            templates: Tensor::from_parts(vec![2, config.d_text], basis[split..].to_vec()),
        })
    }

    pub fn stack(&self, modality: Modality) -> &EncoderStack {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    /// Token embeddings of one class prompt, `[template, class]`, scaled to
    /// the width of a layer-normalized row.
    pub fn prompt_tokens(&self, modality: Modality, class: usize) -> Result<Tensor> {
        let template = match modality {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Text => return Err(Error::Config("prompts are built for visual or audio".into())),
        };
        if class >= self.config.n_classes {
            return Err(Error::Index {
                what: "class",
                index: class,
                len: self.config.n_classes,
            });
        }
        let d = self.config.d_text;
        let scale = (d as f64).sqrt();
        let rows = [&self.templates.data()[template * d..(template + 1) * d], &self.codebook.data()[class * d..(class + 1) * d]];
        let data = rows.iter().flat_map(|r| r.iter().map(|v| v * scale)).collect();
        Ok(Tensor::from_parts(vec![2, d], data))
    }

    /// Layer-0 visual `[T, N_v, D_v]` and audio `[T, N_a, D_a]` tokens.
    pub fn embed_raw(&self, sample: &SyntheticSample) -> Result<(Tensor, Tensor)> {
        Ok((
            self.visual.embed_evidence(&sample.visual_evidence)?,
            self.audio.embed_evidence(&sample.audio_evidence)?,
        ))
    }

    /// Runs tokens `[L, D_t]` through every text block.
    pub fn encode_text(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut x = tape.input(tokens.clone());
        for l in 0..self.text.n_layers() {
            x = self.text.encode_layer(&mut tape, l, x)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Nearest codebook row to `v` by inner product.
    pub fn nearest_class(&self, v: &[f64]) -> usize {
        self.codebook
            .rows()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
            .0
    }

    pub fn named_tensors(&self) -> NamedTensors {
        let mut out = NamedTensors::default();
        self.visual.named_tensors(&mut out);
        self.audio.named_tensors(&mut out);
        self.text.named_tensors(&mut out);
        out.push("codebook".into(), self.codebook.clone());
        out.push("templates".into(), self.templates.clone());
        out
    }

    /// SHA-256 over every frozen weight, in export order.
    pub fn weight_digest(&self) -> String {
        self.named_tensors().sha256_hex()
    }
}
