//! Adaptive gradient clipping: each unit's gradient is rescaled so that its
//! norm never exceeds `λ` times the norm of the matching weight unit
//! (floored at `ε`). Global-norm clipping is provided as a baseline.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// `(outer, units, inner)` extents of a tensor split at `unit_axis`.
/// `None` treats the whole tensor as a single unit.
fn unit_layout(shape: &[usize], unit_axis: Option<usize>) -> Result<(usize, usize, usize)> {
    match unit_axis {
        None => Ok((1, 1, shape.iter().product())),
        Some(a) if a < shape.len() => Ok((shape[..a].iter().product(), shape[a], shape[a + 1..].iter().product())),
        Some(a) => Err(shape_err("unit_norms", format!("axis {a} out of range for {shape:?}"))),
    }
}

fn for_each_unit_entry(layout: (usize, usize, usize), mut f: impl FnMut(usize, usize)) {
    let (outer, units, inner) = layout;
    for o in 0..outer {
        for u in 0..units {
            let base = (o * units + u) * inner;
            for i in base..base + inner {
                f(u, i);
            }
        }
    }
}

/// Frobenius norm of every unit, taken over all extents except `unit_axis`.
pub fn unit_norms<T: Real>(w: &Tensor<T>, unit_axis: Option<usize>) -> Result<Vec<T>> {
    if w.rank() == 0 && unit_axis.is_some() {
        return Err(shape_err("unit_norms", "scalar has no unit axis"));
    }
    let layout = unit_layout(w.shape(), unit_axis)?;
    let mut sq = vec![T::zero(); layout.1];
    let d = w.data();
    for_each_unit_entry(layout, |u, i| sq[u] += d[i] * d[i]);
    Ok(sq.into_iter().map(|s| s.sqrt()).collect())
}

/// Per-unit clipping outcome of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitClipStats {
    pub units: usize,
    pub clipped: usize,
    /// Largest `‖Gᵢ‖ / max(‖Wᵢ‖, ε)` before clipping.
    pub max_ratio: f64,
}

impl UnitClipStats {
    pub fn fraction_clipped(&self) -> f64 {
        if self.units == 0 {
            0.0
        } else {
            self.clipped as f64 / self.units as f64
        }
    }
}

/// Clips `g` in place unit by unit against `w`.
pub fn agc_clip_in_place<T: Real>(
    g: &mut Tensor<T>,
    w: &Tensor<T>,
    unit_axis: Option<usize>,
    lambda: f64,
    eps: f64,
) -> Result<UnitClipStats> {
    if g.shape() != w.shape() {
        return Err(shape_err(
            "agc_clip",
            format!("gradient {:?} vs weight {:?}", g.shape(), w.shape()),
        ));
    }
    if lambda <= 0.0 || eps <= 0.0 {
        return Err(Error::Config(format!(
            "clipping needs lambda > 0 and eps > 0, got {lambda} and {eps}"
        )));
    }
    let wn = unit_norms(w, unit_axis)?;
    let gn = unit_norms(g, unit_axis)?;
    let (lam, eps_t) = (T::lit(lambda), T::lit(eps));
    let mut scale: Vec<Option<T>> = vec![None; wn.len()];
    let mut stats = UnitClipStats {
        units: wn.len(),
        clipped: 0,
        max_ratio: 0.0,
    };
    for (u, (&wi, &gi)) in wn.iter().zip(&gn).enumerate() {
        let wi = wi.max(eps_t);
        let ratio = gi / wi;
        stats.max_ratio = stats.max_ratio.max(ratio.f64());
        if ratio > lam {
            scale[u] = Some(lam * wi / gi);
            stats.clipped += 1;
        }
    }
    if stats.clipped > 0 {
        let layout = unit_layout(g.shape(), unit_axis)?;
        let d = g.data_mut();
        for_each_unit_entry(layout, |u, i| {
            if let Some(s) = scale[u] {
                d[i] *= s;
            }
        });
    }
    Ok(stats)
}

/// `Gᵢ ← λ·(‖Wᵢ‖*/‖Gᵢ‖)·Gᵢ` wherever `‖Gᵢ‖/‖Wᵢ‖* > λ`, with `‖Wᵢ‖* = max(‖Wᵢ‖, ε)`.
pub fn agc_clip<T: Real>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    unit_axis: Option<usize>,
    lambda: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut out = g.clone();
    agc_clip_in_place(&mut out, w, unit_axis, lambda, eps)?;
    Ok(out)
}

/// `G ← λ·G/‖G‖` over the concatenation of every tensor when `‖G‖ > λ`.
/// Returns the norm before clipping.
pub fn global_norm_clip<T: Real>(grads: &mut [Tensor<T>], lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::Config(format!("clipping needs lambda > 0, got {lambda}")));
    }
    let norm = grads.iter().fold(T::zero(), |a, g| a + g.sum_sq()).sqrt();
    let lam = T::lit(lambda);
    if norm > lam {
        let s = lam / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm.f64())
}

/// Which clipping rule a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    None,
    /// Unit-wise adaptive clipping.
    Agc,
    /// Adaptive clipping with each whole tensor as one unit.
    AgcLayerwise,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub mode: ClipMode,
    pub lambda: f64,
    pub eps: f64,
    /// Clip parameters whose name starts with `stem`.
    pub clip_stem: bool,
    /// Extra name prefixes left unclipped, for layer-removal studies.
    pub exclude_prefixes: Vec<String>,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            mode: ClipMode::Agc,
            lambda: DEFAULT_LAMBDA,
            eps: DEFAULT_EPS,
            clip_stem: true,
            exclude_prefixes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamClip {
    pub name: String,
    pub fraction_of_units_clipped: f64,
    pub max_ratio: f64,
    pub lambda_used: f64,
}

/// Clipping statistics for one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub params: Vec<ParamClip>,
    /// Gradient norm before global clipping, when that mode is active.
    pub global_norm: Option<f64>,
}

impl ClipReport {
    /// Fraction of clipped units across every clipped parameter.
    pub fn overall_fraction(&self) -> f64 {
        if self.params.is_empty() {
            0.0
        } else {
            self.params.iter().map(|p| p.fraction_of_units_clipped).sum::<f64>() / self.params.len() as f64
        }
    }

    pub fn max_ratio(&self) -> f64 {
        self.params.iter().map(|p| p.max_ratio).fold(0.0, f64::max)
    }
}

impl ClipConfig {
    pub fn applies_to(&self, name: &str, agc_clipped: bool) -> bool {
        agc_clipped
            && (self.clip_stem || !name.starts_with("stem"))
            && !self.exclude_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Clips the gradients held in `store` according to `cfg`.
pub fn clip_store<T: Real>(store: &mut ParamStore<T>, cfg: &ClipConfig) -> Result<ClipReport> {
    let mut report = ClipReport::default();
    match cfg.mode {
        ClipMode::None => {}
        ClipMode::Global => {
            let mut grads = store.grads();
            report.global_norm = Some(global_norm_clip(&mut grads, cfg.lambda)?);
            store.set_grads(grads)?;
        }
        ClipMode::Agc | ClipMode::AgcLayerwise => {
            for p in store.iter_mut() {
                if !cfg.applies_to(&p.name, p.flags.agc_clipped) {
                    continue;
                }
                let axis = if cfg.mode == ClipMode::Agc { p.unit_axis } else { None };
                let stats = agc_clip_in_place(&mut p.grad, &p.value, axis, cfg.lambda, cfg.eps)?;
                report.params.push(ParamClip {
                    name: p.name.clone(),
                    fraction_of_units_clipped: stats.fraction_clipped(),
                    max_ratio: stats.max_ratio,
                    lambda_used: cfg.lambda,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_norm_is_five() {
        let w = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        assert_eq!(unit_norms(&w, Some(0)).unwrap(), vec![5.0]);
    }

    #[test]
    fn conv_weight_has_one_norm_per_filter() {
        let w = Tensor::<f64>::ones(&[2, 3, 3, 3]);
        let n = unit_norms(&w, Some(0)).unwrap();
        assert_eq!(n.len(), 2);
        assert!((n[0] - 27f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn non_leading_unit_axis() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 1.0, 4.0, 0.0]).unwrap();
        assert_eq!(unit_norms(&w, Some(1)).unwrap(), vec![5.0, 1.0]);
    }

    #[test]
    fn hand_values() {
        // ‖W‖ = 2, ‖G‖ = 1, λ = 0.1 → 0.2
        let w = Tensor::<f64>::from_f64(&[1, 2], &[2.0, 0.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[1, 2], &[0.6, 0.8]).unwrap();
        let out = agc_clip(&g, &w, Some(0), 0.1, DEFAULT_EPS).unwrap();
        assert!((out.l2_norm() - 0.2).abs() < 1e-15);
        // below threshold
        let small = g.scale(0.1);
        assert_eq!(agc_clip(&small, &w, Some(0), 0.1, DEFAULT_EPS).unwrap(), small);
        // zero weight under the ε floor
        let z = Tensor::<f64>::zeros(&[1, 2]);
        let out = agc_clip(&g, &z, Some(0), 0.01, 1e-3).unwrap();
        assert!((out.l2_norm() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn global_clip_halves() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[2.0, 0.0]).unwrap()];
        let n = global_norm_clip(&mut g, 1.0).unwrap();
        assert_eq!(n, 2.0);
        assert_eq!(g[0].data(), &[1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let g = Tensor::<f64>::zeros(&[4]);
        assert!(agc_clip(&g, &w, Some(0), 0.1, 1e-3).is_err());
    }
}
