//! Text-bridged audio-visual adapter with gated semantic modulation.
//!
//! For the visual stream at one layer (the audio stream mirrors it):
//!
//! ```text
//! z_v, z_a, z_t   = V W_down_v, A W_down_a, T_v W_down_t
//! c_t             = Attn(q = z_v, kv = z_t)          text-aware visual context
//! c_a             = Attn(q = c_t, kv = z_a)          text-bridged audio context
//! (w_a, w_t)      = sigmoid(MLP(mean(z_t)))          channel gates
//! z_v'            = z_v + w_a * c_a + w_t * c_t
//! V_next          = V + z_v' W_up_v
//! ```
//!
//! Cross-modal attention is per segment by default: queries at segment `t`
//! only see counterpart tokens at segment `t`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::{normal, orthogonal, sub_rng};
use crate::tensor::Tensor;
use crate::weights::NamedTensors;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    FullGsm,
    PlainResidual,
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    PerSegment,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_bottleneck: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    /// Learnable query/key/value maps inside the bottleneck.
    pub qkv_projections: bool,
    pub scope: AttentionScope,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d_bottleneck: 16,
            d_hidden: 32,
            n_heads: 1,
            qkv_projections: true,
            scope: AttentionScope::PerSegment,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_bottleneck == 0 || self.d_hidden == 0 || self.n_heads == 0 {
            return Err(Error::Config("adapter dims and n_heads must be positive".into()));
        }
        if self.d_bottleneck % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_bottleneck {} is not divisible by n_heads {}",
                self.d_bottleneck, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Stream widths an adapter connects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamDims {
    pub visual: usize,
    pub audio: usize,
    pub text: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProj {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMlp {
    /// `[D_b, D_h]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[D_h, 2 D_b]`; the first half produces the cross-modal gate.
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GateMlp {
    fn init(db: usize, dh: usize, r: &mut crate::init::Rng) -> GateMlp {
        GateMlp {
            w1: normal(&[db, dh], (1.0 / db as f64).sqrt(), r),
            b1: Tensor::zeros(&[dh]),
            w2: normal(&[dh, 2 * db], 0.1 * (1.0 / dh as f64).sqrt(), r),
            b2: Tensor::zeros(&[2 * db]),
        }
    }

    /// Zero weights and the given bias on the output layer.
    pub fn constant(db: usize, dh: usize, bias: f64) -> GateMlp {
        GateMlp {
            w1: Tensor::zeros(&[db, dh]),
            b1: Tensor::zeros(&[dh]),
            w2: Tensor::zeros(&[dh, 2 * db]),
            b2: Tensor::full(&[2 * db], bias),
        }
    }
}

/// Trainable parameters of one adapter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub w_down_v: Tensor,
    pub w_down_a: Tensor,
    pub w_down_t: Tensor,
    /// Visual queries over text, then text-aware visual over audio.
    pub attn_text_v: Option<AttentionProj>,
    pub attn_cross_v: Option<AttentionProj>,
    pub attn_text_a: Option<AttentionProj>,
    pub attn_cross_a: Option<AttentionProj>,
    pub w_up_v: Tensor,
    pub w_up_a: Tensor,
    /// Absent for adapters without gating.
    pub gate_v: Option<GateMlp>,
    pub gate_a: Option<GateMlp>,
}

impl AdapterState {
    /// `W_up` starts at zero, so a fresh adapter is an exact identity.
    pub fn init(dims: StreamDims, cfg: &AdapterConfig, mode: AdapterMode, seed: u64, layer: usize) -> Result<AdapterState> {
        cfg.validate()?;
        let db = cfg.d_bottleneck;
        let mut r = sub_rng(seed, &format!("adapter{layer}"));
        let down = |d: usize, r: &mut crate::init::Rng| normal(&[d, db], (1.0 / d as f64).sqrt(), r);
        let w_down_v = down(dims.visual, &mut r);
        let w_down_a = down(dims.audio, &mut r);
        let w_down_t = down(dims.text, &mut r);
        let proj = |r: &mut crate::init::Rng| {
            cfg.qkv_projections.then(|| AttentionProj {
                wq: orthogonal(db, db, 1.0, r),
                wk: orthogonal(db, db, 1.0, r),
                wv: orthogonal(db, db, 1.0, r),
            })
        };
        let attn_text_v = proj(&mut r);
        let attn_cross_v = proj(&mut r);
        let attn_text_a = proj(&mut r);
        let attn_cross_a = proj(&mut r);
        let gated = mode == AdapterMode::FullGsm;
        let gate_v = gated.then(|| GateMlp::init(db, cfg.d_hidden, &mut r));
        let gate_a = gated.then(|| GateMlp::init(db, cfg.d_hidden, &mut r));
        Ok(AdapterState {
            w_down_v,
            w_down_a,
            w_down_t,
            attn_text_v,
            attn_cross_v,
            attn_text_a,
            attn_cross_a,
            w_up_v: Tensor::zeros(&[db, dims.visual]),
            w_up_a: Tensor::zeros(&[db, dims.audio]),
            gate_v,
            gate_a,
        })
    }

    /// Every parameter tensor with its name, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_down_v", &self.w_down_v),
            ("w_down_a", &self.w_down_a),
            ("w_down_t", &self.w_down_t),
        ];
        for (name, p) in [
            ("attn_text_v", &self.attn_text_v),
            ("attn_cross_v", &self.attn_cross_v),
            ("attn_text_a", &self.attn_text_a),
            ("attn_cross_a", &self.attn_cross_a),
        ] {
            if let Some(p) = p {
                out.extend(proj_names(name).into_iter().zip([&p.wq, &p.wk, &p.wv]));
            }
        }
        out.push(("w_up_v", &self.w_up_v));
        out.push(("w_up_a", &self.w_up_a));
        for (name, g) in [("gate_v", &self.gate_v), ("gate_a", &self.gate_a)] {
            if let Some(g) = g {
                out.extend(gate_names(name).into_iter().zip([&g.w1, &g.b1, &g.w2, &g.b2]));
            }
        }
        out
    }

    /// Mutable view in the same order as [`AdapterState::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_down_v, &mut self.w_down_a, &mut self.w_down_t];
        for p in [
            &mut self.attn_text_v,
            &mut self.attn_cross_v,
            &mut self.attn_text_a,
            &mut self.attn_cross_a,
        ]
        .into_iter()
        .flatten()
        {
            out.extend([&mut p.wq, &mut p.wk, &mut p.wv]);
        }
        out.push(&mut self.w_up_v);
        out.push(&mut self.w_up_a);
        for g in [&mut self.gate_v, &mut self.gate_a].into_iter().flatten() {
            out.extend([&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_tensors(&self, prefix: &str, out: &mut NamedTensors) {
        for (name, t) in self.tensors() {
            out.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Loads tensors written by [`AdapterState::named_tensors`] into a state
    /// of matching structure.
    pub fn load_from(&mut self, prefix: &str, src: &NamedTensors) -> Result<()> {
        let names: Vec<String> = self.tensors().iter().map(|(n, _)| format!("{prefix}.{n}")).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let shape = slot.shape().to_vec();
            *slot = src.expect(name, &shape)?;
        }
        Ok(())
    }

    pub fn d_bottleneck(&self) -> usize {
        self.w_down_v.last_dim()
    }

    /// Places parameters on the tape, trainable or frozen.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> PlacedAdapter {
        let mut place = |t: &'a Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let w_down_v = place(&self.w_down_v);
        let w_down_a = place(&self.w_down_a);
        let w_down_t = place(&self.w_down_t);
        let mut proj = |p: &'a Option<AttentionProj>| {
            p.as_ref().map(|p| PlacedProj {
                wq: place(&p.wq),
                wk: place(&p.wk),
                wv: place(&p.wv),
            })
        };
        let attn_text_v = proj(&self.attn_text_v);
        let attn_cross_v = proj(&self.attn_cross_v);
        let attn_text_a = proj(&self.attn_text_a);
        let attn_cross_a = proj(&self.attn_cross_a);
        let mut place = |t: &'a Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let w_up_v = place(&self.w_up_v);
        let w_up_a = place(&self.w_up_a);
        let mut gate = |g: &'a Option<GateMlp>| {
            g.as_ref().map(|g| PlacedGate {
                w1: place(&g.w1),
                b1: place(&g.b1),
                w2: place(&g.w2),
                b2: place(&g.b2),
            })
        };
        let gate_v = gate(&self.gate_v);
        let gate_a = gate(&self.gate_a);
        PlacedAdapter {
            w_down_v,
            w_down_a,
            w_down_t,
            attn_text_v,
            attn_cross_v,
            attn_text_a,
            attn_cross_a,
            w_up_v,
            w_up_a,
            gate_v,
            gate_a,
        }
    }
}

fn proj_names(prefix: &'static str) -> [&'static str; 3] {
    match prefix {
        "attn_text_v" => ["attn_text_v.wq", "attn_text_v.wk", "attn_text_v.wv"],
        "attn_cross_v" => ["attn_cross_v.wq", "attn_cross_v.wk", "attn_cross_v.wv"],
        "attn_text_a" => ["attn_text_a.wq", "attn_text_a.wk", "attn_text_a.wv"],
        _ => ["attn_cross_a.wq", "attn_cross_a.wk", "attn_cross_a.wv"],
    }
}

fn gate_names(prefix: &'static str) -> [&'static str; 4] {
    match prefix {
        "gate_v" => ["gate_v.w1", "gate_v.b1", "gate_v.w2", "gate_v.b2"],
        _ => ["gate_a.w1", "gate_a.b1", "gate_a.w2", "gate_a.b2"],
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlacedProj {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PlacedGate {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// An [`AdapterState`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PlacedAdapter {
    pub w_down_v: Var,
    pub w_down_a: Var,
    pub w_down_t: Var,
    pub attn_text_v: Option<PlacedProj>,
    pub attn_cross_v: Option<PlacedProj>,
    pub attn_text_a: Option<PlacedProj>,
    pub attn_cross_a: Option<PlacedProj>,
    pub w_up_v: Var,
    pub w_up_a: Var,
    pub gate_v: Option<PlacedGate>,
    pub gate_a: Option<PlacedGate>,
}

impl PlacedAdapter {
    /// Vars in [`AdapterState::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.w_down_v, self.w_down_a, self.w_down_t];
        for p in [self.attn_text_v, self.attn_cross_v, self.attn_text_a, self.attn_cross_a]
            .into_iter()
            .flatten()
        {
            out.extend([p.wq, p.wk, p.wv]);
        }
        out.extend([self.w_up_v, self.w_up_a]);
        for g in [self.gate_v, self.gate_a].into_iter().flatten() {
            out.extend([g.w1, g.b1, g.w2, g.b2]);
        }
        out
    }
}

/// The two channel gates of one stream, each `[D_b]`.
#[derive(Clone, Copy, Debug)]
pub struct GatePair {
    pub w_cross: Var,
    pub w_text: Var,
}

/// Replaces computed gates with a constant, for analysis and testing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOverride {
    None,
    Constant(f64),
}

// ---- operations -------------------------------------------------------------

/// `x[.., D] W_down[D, D_b]`.
pub fn down_project(tape: &mut Tape<'_>, x: Var, w_down: Var) -> Result<Var> {
    let (xs, ws) = (tape.shape(x), tape.shape(w_down));
    if xs.last() != ws.first() {
        return Err(Error::dim("down_project", xs, ws));
    }
    tape.matmul(x, w_down)
}

/// Scaled dot-product attention of `queries` over `keys_values`.
///
/// `queries` is `[.., Nq, D_b]`; `keys_values` is either a single `[Nk, D_b]`
/// sequence shared by every query group or `[.., Nk, D_b]` with the same
/// leading axes. Returns the context and one weight tensor per head.
pub fn attention(
    tape: &mut Tape<'_>,
    queries: Var,
    keys_values: Var,
    proj: Option<PlacedProj>,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let qs = tape.shape(queries).to_vec();
    let ks = tape.shape(keys_values).to_vec();
    let width = *qs.last().unwrap();
    if ks.last() != Some(&width) || width % n_heads != 0 {
        return Err(Error::dim("attention", &qs, &ks));
    }
    let (q, k, v) = match proj {
        Some(p) => (
            tape.matmul(queries, p.wq)?,
            tape.matmul(keys_values, p.wk)?,
            tape.matmul(keys_values, p.wv)?,
        ),
        None => (queries, keys_values, keys_values),
    };
    let head = width / n_heads;
    let scale = 1.0 / (head as f64).sqrt();
    let mut contexts = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * head, head)?,
                tape.slice_last(k, h * head, head)?,
                tape.slice_last(v, h * head, head)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let w = tape.softmax(scores)?;
        contexts.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let ctx = if n_heads == 1 {
        contexts[0]
    } else {
        let axis = tape.shape(contexts[0]).len() - 1;
        tape.concat(&contexts, axis)?
    };
    Ok((ctx, weights))
}

/// Stage one: stream queries attend over the down-projected text rows.
pub fn text_aware_context(
    tape: &mut Tape<'_>,
    z_q: Var,
    z_t: Var,
    proj: Option<PlacedProj>,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let ts = tape.shape(z_t);
    if ts.len() != 2 {
        return Err(Error::shape("text_aware_context", format!("text must be [L, D_b], got {ts:?}")));
    }
    attention(tape, z_q, z_t, proj, n_heads)
}

/// Stage two: the text-aware context queries the counterpart stream.
///
/// Both operands are `[T, N, D_b]` with the same `T`. With
/// [`AttentionScope::PerSegment`] each segment attends only to itself.
pub fn text_bridged_context(
    tape: &mut Tape<'_>,
    c_t: Var,
    z_other: Var,
    proj: Option<PlacedProj>,
    n_heads: usize,
    scope: AttentionScope,
) -> Result<(Var, Vec<Var>)> {
    let qs = tape.shape(c_t).to_vec();
    let os = tape.shape(z_other).to_vec();
    if qs.len() != 3 || os.len() != 3 || qs[0] != os[0] || qs[2] != os[2] {
        return Err(Error::dim("text_bridged_context", &qs, &os));
    }
    match scope {
        AttentionScope::PerSegment => attention(tape, c_t, z_other, proj, n_heads),
        AttentionScope::Global => {
            let q = tape.reshape(c_t, &[1, qs[0] * qs[1], qs[2]])?;
            let kv = tape.reshape(z_other, &[1, os[0] * os[1], os[2]])?;
            let (ctx, w) = attention(tape, q, kv, proj, n_heads)?;
            Ok((tape.reshape(ctx, &qs)?, w))
        }
    }
}

/// `sigmoid(MLP(mean(z_t)))`, split into the cross-modal and text gates.
pub fn gsm_gates(tape: &mut Tape<'_>, z_t: Var, mlp: PlacedGate) -> Result<GatePair> {
    let pooled = tape.mean_tokens(z_t)?;
    let db = *tape.shape(pooled).last().unwrap();
    let w2s = tape.shape(mlp.w2);
    if w2s.last() != Some(&(2 * db)) {
        return Err(Error::dim("gsm_gates", &[2 * db], w2s));
    }
    let row = tape.reshape(pooled, &[1, db])?;
    let h = tape.matmul(row, mlp.w1)?;
    let h = tape.add(h, mlp.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add(o, mlp.b2)?;
    let g = tape.sigmoid(o)?;
    let w_cross = tape.slice_last(g, 0, db)?;
    let w_text = tape.slice_last(g, db, db)?;
    Ok(GatePair {
        w_cross: tape.reshape(w_cross, &[db])?,
        w_text: tape.reshape(w_text, &[db])?,
    })
}

/// `z + w_cross * c_cross + w_text * c_text`, gates broadcast over positions.
pub fn gsm_modulate(tape: &mut Tape<'_>, z: Var, c_cross: Var, c_text: Var, gates: GatePair) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    for v in [c_cross, c_text] {
        if tape.shape(v) != zs.as_slice() {
            return Err(Error::dim("gsm_modulate", &zs, tape.shape(v)));
        }
    }
    for g in [gates.w_cross, gates.w_text] {
        if tape.shape(g) != [*zs.last().unwrap()] {
            return Err(Error::dim("gsm_modulate", &zs, tape.shape(g)));
        }
    }
    let cross = tape.mul(c_cross, gates.w_cross)?;
    let text = tape.mul(c_text, gates.w_text)?;
    let out = tape.add(z, cross)?;
    tape.add(out, text)
}

/// Gate-free combination used by the ablation without modulation.
pub fn plain_residual(tape: &mut Tape<'_>, z: Var, c_cross: Var, c_text: Var) -> Result<Var> {
    let out = tape.add(z, c_cross)?;
    tape.add(out, c_text)
}

/// Intermediate values of one adapter application, for inspection.
#[derive(Clone, Debug)]
pub struct AdapterTrace {
    pub z_v: Var,
    pub z_a: Var,
    pub z_v_mod: Var,
    pub z_a_mod: Var,
    pub gates_v: Option<GatePair>,
    pub gates_a: Option<GatePair>,
    /// All attention weight tensors produced (both stages, both streams).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct AdapterOutput {
    pub visual: Var,
    pub audio: Var,
    pub trace: Option<AdapterTrace>,
}

/// One adapter layer over visual `[T, N_v, D_v]` and audio `[T, N_a, D_a]`
/// features with anchors `T_v`, `T_a` (`[K + L, D_t]`).
#[allow(clippy::too_many_arguments)]
pub fn adapter_forward(
    tape: &mut Tape<'_>,
    visual: Var,
    audio: Var,
    text_v: Var,
    text_a: Var,
    params: &PlacedAdapter,
    cfg: &AdapterConfig,
    mode: AdapterMode,
    gate_override: GateOverride,
) -> Result<AdapterOutput> {
    if mode == AdapterMode::Disabled {
        return Ok(AdapterOutput {
            visual,
            audio,
            trace: None,
        });
    }
    let (vs, as_) = (tape.shape(visual).to_vec(), tape.shape(audio).to_vec());
    if vs.len() != 3 || as_.len() != 3 || vs[0] != as_[0] {
        return Err(Error::dim("adapter_forward", &vs, &as_));
    }
    let z_v = down_project(tape, visual, params.w_down_v)?;
    let z_a = down_project(tape, audio, params.w_down_a)?;
    let z_tv = down_project(tape, text_v, params.w_down_t)?;
    let z_ta = down_project(tape, text_a, params.w_down_t)?;

    let (c_tv, w1) = text_aware_context(tape, z_v, z_tv, params.attn_text_v, cfg.n_heads)?;
    let (c_a, w2) = text_bridged_context(tape, c_tv, z_a, params.attn_cross_v, cfg.n_heads, cfg.scope)?;
    let (c_ta, w3) = text_aware_context(tape, z_a, z_ta, params.attn_text_a, cfg.n_heads)?;
    let (c_v, w4) = text_bridged_context(tape, c_ta, z_v, params.attn_cross_a, cfg.n_heads, cfg.scope)?;

    let (z_v_mod, z_a_mod, gates_v, gates_a) = match mode {
        AdapterMode::FullGsm => {
            let (gv, ga) = match gate_override {
                GateOverride::None => {
                    let (Some(mv), Some(ma)) = (params.gate_v, params.gate_a) else {
                        return Err(Error::Config("full GSM mode needs gate MLPs".into()));
                    };
                    (gsm_gates(tape, z_tv, mv)?, gsm_gates(tape, z_ta, ma)?)
                }
                GateOverride::Constant(value) => {
                    let db = *tape.shape(z_v).last().unwrap();
                    let mut constant = || {
                        let w = tape.input(Tensor::full(&[db], value));
                        GatePair { w_cross: w, w_text: w }
                    };
                    (constant(), constant())
                }
            };
            (
                gsm_modulate(tape, z_v, c_a, c_tv, gv)?,
                gsm_modulate(tape, z_a, c_v, c_ta, ga)?,
                Some(gv),
                Some(ga),
            )
        }
        _ => (
            plain_residual(tape, z_v, c_a, c_tv)?,
            plain_residual(tape, z_a, c_v, c_ta)?,
            None,
            None,
        ),
    };

    let up_v = tape.matmul(z_v_mod, params.w_up_v)?;
    let up_a = tape.matmul(z_a_mod, params.w_up_a)?;
    let v_next = tape.add(visual, up_v)?;
    let a_next = tape.add(audio, up_a)?;
    Ok(AdapterOutput {
        visual: v_next,
        audio: a_next,
        trace: Some(AdapterTrace {
            z_v,
            z_a,
            z_v_mod,
            z_a_mod,
            gates_v,
            gates_a,
            attention: [w1, w2, w3, w4].concat(),
        }),
    })
}
