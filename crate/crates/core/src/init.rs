//! Seeded weight initializers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from a base seed and a label, so adding a new
/// consumer never shifts the draws of existing ones.
pub fn sub_rng(seed: u64, label: &str) -> Rng {
    // FNV-1a over the label, folded with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * standard_normal(rng))
}

/// `[rows, cols]` with orthonormal rows (rows <= cols) or orthonormal
/// columns (rows > cols), scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut basis = gram_schmidt(short, long, rng);
    for v in basis.iter_mut() {
        *v *= gain;
    }
    if rows <= cols {
        Tensor::from_parts(vec![rows, cols], basis)
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..short {
            for j in 0..long {
                t[j * cols + i] = basis[i * long + j];
            }
        }
        Tensor::from_parts(vec![rows, cols], t)
    }
}

/// `count` orthonormal vectors of length `dim`, row-major.
pub fn gram_schmidt(count: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in {dim} dims");
    let mut out: Vec<f64> = Vec::with_capacity(count * dim);
    while out.len() < count * dim {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        // Two passes of modified Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for prev in out.chunks_exact(dim) {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}
