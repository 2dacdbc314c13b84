//! Define-by-run reverse-mode differentiation.
//!
//! Every op executed through a [`Tape`] appends a node holding its output and
//! enough saved state to replay the adjoint. [`Tape::backward`] walks the
//! nodes in strict reverse order. Nodes that do not depend on a
//! gradient-requiring leaf never receive a gradient buffer.
//!
//! Borrowed leaves ([`Tape::param`], [`Tape::constant`]) let frozen weights
//! and trainable parameters enter a graph without copying.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        /// `b` is a single matrix broadcast over `a`'s leading axes.
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Sigmoid {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanTokens {
        a: Var,
        tokens: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    SliceLast {
        a: Var,
        start: usize,
        width: usize,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        a: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    sigmoid_grad_scale: f64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            sigmoid_grad_scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node, in execution order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    /// Scales the sigmoid adjoint by `factor`. A deliberately wrong backward
    /// rule, used only to check that gradient verification catches it.
    #[doc(hidden)]
    pub fn inject_sigmoid_fault(&mut self, factor: f64) {
        self.sigmoid_grad_scale = factor;
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Owned input that never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Borrowed frozen tensor.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- accessors --------------------------------------------------------

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if this node had one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    // ---- ops --------------------------------------------------------------

    /// `a[.., m, k] x b[.., k, n]`. `b` is either a single matrix broadcast
    /// over `a`'s leading axes or shares them exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] x b[.., n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(op_name, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if kb != k || !(shared_b || lead_a == lead_b) {
            return Err(Error::dim(op_name, &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            shared_b,
            batch,
            m,
            k,
            n,
        };
        self.push(op_name, Tensor::from_parts(out_shape, out), op, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank >= 2 required, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let out = transpose_batched(self.value(a).data(), batch, rows, cols);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        self.push(
            "transpose",
            Tensor::from_parts(shape, out),
            Op::Transpose {
                a,
                batch,
                rows,
                cols,
            },
            &[a],
        )
    }

    /// Elementwise sum. The second operand may also be a trailing suffix of
    /// the first's shape (bias rows, gates broadcast over positions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product, broadcasting like [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o *= y;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b])
    }

    fn order_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { a, s }, &[a])
    }

    /// Logistic function, kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", Tensor::from_parts(shape, out), Op::Sigmoid { a }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", Tensor::from_parts(shape, out), Op::Gelu { a }, &[a])
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(t.last_dim()) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { a }, &[a])
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut xhat = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.numel() / d);
        for row in xhat.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        let value = Tensor::from_parts(shape, xhat.clone());
        self.push("layer_norm", value, Op::LayerNorm { a, xhat, inv_std }, &[a])
    }

    /// Mean over the token axis: `[.., N, D] -> [.., D]`.
    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("mean_tokens", format!("rank >= 2 required, got {s:?}")));
        }
        let (tokens, d) = (s[s.len() - 2], s[s.len() - 1]);
        let groups: usize = s[..s.len() - 2].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let dst = &mut out[g * d..(g + 1) * d];
            for row in src[g * tokens * d..(g + 1) * tokens * d].chunks_exact(d) {
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += x;
                }
            }
            for o in dst.iter_mut() {
                *o /= tokens as f64;
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(d);
        self.push(
            "mean_tokens",
            Tensor::from_parts(shape, out),
            Op::MeanTokens { a, tokens },
            &[a],
        )
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::dim("concat", &base, s));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
            outer,
            inner,
        };
        self.push("concat", Tensor::from_parts(shape, out), op, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        if width == 0 || start + width > d {
            return Err(Error::shape(
                "slice_last",
                format!("columns {start}..{} of {d}", start + width),
            ));
        }
        let out: Vec<f64> = t
            .rows()
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        self.push(
            "slice_last",
            Tensor::from_parts(shape, out),
            Op::SliceLast { a, start, width },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Mean cross-entropy of `[T, C]` logits against `T` class indices,
    /// via a max-shifted log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        let op = Op::CrossEntropy {
            a: logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a single-element output.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape(root)),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let sigmoid_scale = self.sigmoid_grad_scale;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(a), val(b));
                with_grad!(a, |ga| {
                    if shared_b {
                        gemm(batch * m, n, k, g, false, bv, !trans_b, ga, 1.0);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                });
                with_grad!(b, |gb| {
                    let rows = if shared_b { batch * m } else { m };
                    let iters = if shared_b { 1 } else { batch };
                    for i in 0..iters {
                        let (ai, gi) = (
                            &av[i * rows * k..(i + 1) * rows * k],
                            &g[i * rows * n..(i + 1) * rows * n],
                        );
                        let gbi = if shared_b {
                            &mut gb[..]
                        } else {
                            &mut gb[i * k * n..(i + 1) * k * n]
                        };
                        if trans_b {
                            // dB[n,k] = dC^T A
                            gemm(n, rows, k, gi, true, ai, false, gbi, 1.0);
                        } else {
                            // dB[k,n] = A^T dC
                            gemm(k, rows, n, ai, true, gi, false, gbi, 1.0);
                        }
                    }
                });
            }
            &Op::Transpose {
                a,
                batch,
                rows,
                cols,
            } => with_grad!(a, |ga| {
                let back = transpose_batched(g, batch, cols, rows);
                axpy(ga, &back);
            }),
            &Op::Add { a, b } => {
                with_grad!(a, |ga| axpy(ga, g));
                with_grad!(b, |gb| {
                    for chunk in g.chunks_exact(gb.len()) {
                        axpy(gb, chunk);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                with_grad!(a, |ga| {
                    let w = bv.len();
                    for (gac, gc) in ga.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                        for ((o, &gi), &y) in gac.iter_mut().zip(gc).zip(bv) {
                            *o += gi * y;
                        }
                    }
                });
                with_grad!(b, |gb| {
                    let w = gb.len();
                    for (ac, gc) in av.chunks_exact(w).zip(g.chunks_exact(w)) {
                        for ((o, &gi), &x) in gb.iter_mut().zip(gc).zip(ac) {
                            *o += gi * x;
                        }
                    }
                });
            }
            &Op::Scale { a, s } => with_grad!(a, |ga| {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }),
            &Op::Sigmoid { a } => with_grad!(a, |ga| {
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *o += sigmoid_scale * gi * y * (1.0 - y);
                }
            }),
            &Op::Gelu { a } => with_grad!(a, |ga| {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(val(a)) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *o += gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                }
            }),
            &Op::Softmax { a } => with_grad!(a, |ga| {
                let d = node.value.last_dim();
                for ((gar, gr), yr) in ga
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(node.value.data().chunks_exact(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, &gi), &y) in gar.iter_mut().zip(gr).zip(yr) {
                        *o += y * (gi - dot);
                    }
                }
            }),
            Op::LayerNorm { a, xhat, inv_std } => with_grad!(*a, |ga| {
                let d = node.value.last_dim();
                for (((gar, gr), xr), &is) in ga
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                    for ((o, &gi), &xh) in gar.iter_mut().zip(gr).zip(xr) {
                        *o += is * (gi - mean_g - xh * mean_gx);
                    }
                }
            }),
            &Op::MeanTokens { a, tokens } => with_grad!(a, |ga| {
                let d = node.value.last_dim();
                let inv = 1.0 / tokens as f64;
                for (grp, gr) in ga.chunks_exact_mut(tokens * d).zip(g.chunks_exact(d)) {
                    for row in grp.chunks_exact_mut(d) {
                        for (o, &gi) in row.iter_mut().zip(gr) {
                            *o += gi * inv;
                        }
                    }
                }
            }),
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    with_grad!(p, |gp| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            axpy(&mut gp[o * w * inner..(o + 1) * w * inner], src);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Reshape { a } => with_grad!(a, |ga| axpy(ga, g)),
            &Op::SliceLast { a, start, width } => with_grad!(a, |ga| {
                let d = nodes[a.0].value.last_dim();
                for (row, gr) in ga.chunks_exact_mut(d).zip(g.chunks_exact(width)) {
                    axpy(&mut row[start..start + width], gr);
                }
            }),
            &Op::Sum { a } => with_grad!(a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::CrossEntropy { a, labels, probs } => with_grad!(*a, |ga| {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                for ((row, pr), &label) in ga.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(labels) {
                    for (j, (o, &p)) in row.iter_mut().zip(pr).enumerate() {
                        let target = if j == label { 1.0 } else { 0.0 };
                        *o += scale * (p - target);
                    }
                }
            }),
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` is frozen.
fn grad_slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

/// Logistic function clamped to the open unit interval.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_batched(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let o = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                o[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

/// `c = beta * c + op(a) op(b)` with `op(a)` logically `[m, k]` and `op(b)`
/// logically `[k, n]`. A transposed operand is stored in the opposite order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and strides address only the
    // row-major extents implied by (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
