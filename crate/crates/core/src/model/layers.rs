//! Dense building blocks with explicit backward passes.
//!
//! Activations are row-major `rows x dim` matrices stored in flat `Vec<f64>`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Strided `C = alpha * A * B + beta * C` over raw slices.
///
/// Element `(i, p)` of `A` is at `a[i * rsa + p * csa]`, and likewise for
/// `B` and `C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, rs: usize, cols: usize, cs: usize| (r - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, rsa, k, csa) && b.len() > last(k, rsb, n, csb));
    }
    assert!(c.len() > last(m, rsc, n, csc));
    // SAFETY: the asserts above keep every addressed element inside its slice,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `C = op(A) * op(B) + beta * C` for dense row-major matrices, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

/// Fully connected layer `y = x W + b`, with `W` stored `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut l = Self::zeros(in_dim, out_dim);
        for w in l.weight.iter_mut() {
            *w = normal.sample(rng);
        }
        l
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        gemm(
            rows,
            self.in_dim,
            self.out_dim,
            x,
            false,
            &self.weight,
            false,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear, need_dx: bool) -> Option<Vec<f64>> {
        gemm(
            self.in_dim,
            rows,
            self.out_dim,
            x,
            true,
            dy,
            false,
            1.0,
            &mut grad.weight,
        );
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; rows * self.in_dim];
            gemm(
                rows,
                self.out_dim,
                self.in_dim,
                dy,
                false,
                &self.weight,
                true,
                0.0,
                &mut dx,
            );
            dx
        })
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub(crate) fn forward(&self, x: &[f64]) -> (Vec<f64>, LnCache) {
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * self.gamma[j] + self.beta[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub(crate) fn backward(&self, cache: &LnCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let d = self.dim;
        let rows = dy.len() / d;
        let mut dx = vec![0.0; dy.len()];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..d {
                grad.gamma[j] += g[j] * xh[j];
                grad.beta[j] += g[j];
                dxhat[j] = g[j] * self.gamma[j];
                mean_d += dxhat[j];
                mean_dx += dxhat[j] * xh[j];
            }
            mean_d /= d as f64;
            mean_dx /= d as f64;
            let s = cache.rstd[r];
            for j in 0..d {
                dx[r * d + j] = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// In-place numerically stable softmax over a row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
