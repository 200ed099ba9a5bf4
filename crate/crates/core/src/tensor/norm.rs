//! Kernels for per-unit weight standardization and per-channel batch
//! normalization.

use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

/// Saved forward state for the standardization backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StandardizeCache<T> {
    pub centered: Vec<T>,
    pub std: Vec<T>,
    pub floored: Vec<bool>,
}

/// `ŵ = (w − μ) / (√N σ)` per row of a `[units, fan_in]` matrix, with σ²
/// floored at `eps_var`.
pub(crate) fn standardize_forward<T: Real>(w: &[T], units: usize, eps_var: T) -> (Vec<T>, StandardizeCache<T>) {
    let fan_in = w.len() / units;
    let n = T::lit(fan_in as f64);
    let sqrt_n = n.sqrt();
    let mut out = vec![T::zero(); w.len()];
    let mut centered = vec![T::zero(); w.len()];
    let mut std = vec![T::zero(); units];
    let mut floored = vec![false; units];
    for u in 0..units {
        let row = &w[u * fan_in..(u + 1) * fan_in];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let c = &mut centered[u * fan_in..(u + 1) * fan_in];
        for (ci, &v) in c.iter_mut().zip(row) {
            *ci = v - mean;
        }
        // second pass removes the rounding error of the first mean, which
        // matters in 32-bit when |μ| ≫ σ
        let resid = c.iter().fold(T::zero(), |a, &v| a + v) / n;
        c.iter_mut().for_each(|v| *v -= resid);
        let var = c.iter().fold(T::zero(), |a, &v| a + v * v) / n;
        let (var, fl) = if var > eps_var { (var, false) } else { (eps_var, true) };
        let s = var.sqrt();
        std[u] = s;
        floored[u] = fl;
        let scale = T::one() / (sqrt_n * s);
        for (o, &ci) in out[u * fan_in..(u + 1) * fan_in].iter_mut().zip(c.iter()) {
            *o = ci * scale;
        }
    }
    (out, StandardizeCache { centered, std, floored })
}

pub(crate) fn standardize_backward<T: Real>(cache: &StandardizeCache<T>, units: usize, dy: &[T]) -> Vec<T> {
    let fan_in = dy.len() / units;
    let n = T::lit(fan_in as f64);
    let sqrt_n = n.sqrt();
    let mut dx = vec![T::zero(); dy.len()];
    for u in 0..units {
        let g = &dy[u * fan_in..(u + 1) * fan_in];
        let c = &cache.centered[u * fan_in..(u + 1) * fan_in];
        let s = cache.std[u];
        let mean_g = g.iter().fold(T::zero(), |a, &v| a + v) / n;
        let dot = if cache.floored[u] {
            T::zero()
        } else {
            g.iter().zip(c).fold(T::zero(), |a, (&gi, &ci)| a + gi * ci)
        };
        let a = T::one() / (sqrt_n * s);
        let b = dot / (sqrt_n * n * s * s * s);
        for ((d, &gi), &ci) in dx[u * fan_in..(u + 1) * fan_in].iter_mut().zip(g).zip(c) {
            *d = (gi - mean_g) * a - b * ci;
        }
    }
    dx
}

/// Per-channel batch mean and unbiased variance.
type BatchStats = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone)]
pub(crate) struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BatchNormMode,
}

/// `x` is `[B, C, inner]` flattened. Returns output, cache and (in train mode)
/// the batch mean and biased variance per channel.
pub(crate) fn batch_norm_forward<T: Real>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    mode: BatchNormMode,
    running: &RunningStats,
    eps: T,
) -> (Vec<T>, BatchNormCache<T>, Option<BatchStats>) {
    let (b, c, inner) = dims;
    let count = T::lit((b * inner) as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut stats = None;
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    for ch in 0..c {
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut s = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * inner;
                    s = x[base..base + inner].iter().fold(s, |a, &v| a + v);
                }
                let m = s / count;
                let mut ss = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * inner;
                    ss = x[base..base + inner].iter().fold(ss, |a, &v| a + (v - m) * (v - m));
                }
                let v = ss / count;
                batch_mean[ch] = m.f64();
                batch_var[ch] = v.f64();
                (m, v)
            }
            BatchNormMode::Eval => (T::lit(running.mean[ch]), T::lit(running.var[ch])),
        };
        let inv = T::one() / (var + eps).sqrt();
        inv_std[ch] = inv;
        for bi in 0..b {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                let xh = (x[i] - mean) * inv;
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    if mode == BatchNormMode::Train {
        stats = Some((batch_mean, batch_var));
    }
    (y, BatchNormCache { xhat, inv_std, mode }, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    dims: (usize, usize, usize),
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, inner) = dims;
    let m = T::lit((b * inner) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * inner;
            for (&d, &xh) in dy[base..base + inner].iter().zip(&cache.xhat[base..base + inner]) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = match cache.mode {
                    BatchNormMode::Train => k / m * (m * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat),
                    BatchNormMode::Eval => k * dy[i],
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
