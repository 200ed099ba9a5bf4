//! SGD with Nesterov momentum and coupled weight decay, the warmup + cosine
//! learning-rate schedule, parameter EMA, reduced-batch SAM and LARS.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::agc::{clip_store, ClipConfig, ClipReport};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const EMA_MAX_DECAY: f64 = 0.99999;

/// Linear warmup from 0 followed by cosine decay to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr_per_256: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(batch_size: usize, steps_per_epoch: usize, total_steps: usize) -> Self {
        Self {
            base_lr_per_256: 0.1,
            batch_size,
            warmup_epochs: 5.0,
            steps_per_epoch,
            total_steps,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr_per_256 * self.batch_size as f64 / 256.0
    }

    pub fn warmup_steps(&self) -> usize {
        let w = (self.warmup_epochs * self.steps_per_epoch as f64).round() as usize;
        w.min(self.total_steps)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        let peak = self.peak_lr();
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(peak * step as f64 / warm as f64);
        }
        let span = self.total_steps - warm;
        if span == 0 {
            return Ok(0.0);
        }
        let progress = (step - warm) as f64 / span as f64;
        Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// `min(0.99999, (1 + t) / (10 + t))`.
pub fn ema_decay(t: u64) -> f64 {
    let t = t as f64;
    ((1.0 + t) / (10.0 + t)).min(EMA_MAX_DECAY)
}

/// Optimizer hyperparameters plus per-parameter momentum buffers and the EMA copy.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub sam_rho: f64,
    pub buffers: Vec<Option<Tensor<T>>>,
    pub step: u64,
    pub ema: Option<Vec<Tensor<T>>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            sam_rho: 0.0,
            buffers: Vec::new(),
            step: 0,
            ema: None,
        }
    }

    fn buffer(&mut self, i: usize, shape: &[usize]) -> Result<&mut Tensor<T>> {
        if self.buffers.len() <= i {
            self.buffers.resize(i + 1, None);
        }
        let b = self.buffers[i].get_or_insert_with(|| Tensor::zeros(shape));
        if b.shape() != shape {
            return Err(shape_err(
                "momentum buffer",
                format!("{:?} vs parameter {:?}", b.shape(), shape),
            ));
        }
        Ok(b)
    }

    /// Copy of `store` with every value replaced by its EMA, if one exists.
    pub fn ema_store(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        if let Some(ema) = &self.ema {
            for (p, e) in out.iter_mut().zip(ema) {
                p.value = e.clone();
            }
        }
        out
    }
}

impl<T: Real> Default for OptimState<T> {
    fn default() -> Self {
        Self::new(0.9, 2e-5)
    }
}

/// `g̃ = g + wd·θ` (decayed params only); `v ← μv + g̃`; `θ ← θ − lr·(g̃ + μv)`.
pub fn sgd_nesterov_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    let (mu, wd, lr) = (T::lit(state.momentum), T::lit(state.weight_decay), T::lit(lr));
    for (i, p) in store.iter_mut().enumerate() {
        if p.grad.shape() != p.value.shape() {
            return Err(shape_err("sgd_nesterov_step", format!("{}: gradient shape", p.name)));
        }
        let decay = p.flags.weight_decayed && state.weight_decay != 0.0;
        let v = state.buffer(i, p.value.shape())?;
        let (theta, g, v) = (p.value.data_mut(), p.grad.data(), v.data_mut());
        for j in 0..theta.len() {
            let gt = if decay { g[j] + wd * theta[j] } else { g[j] };
            v[j] = mu * v[j] + gt;
            theta[j] -= lr * (gt + mu * v[j]);
        }
    }
    Ok(())
}

/// `ema ← d·ema + (1 − d)·θ`, written as `ema + (1 − d)(θ − ema)` so an EMA that
/// already equals the parameters stays bit-identical.
pub fn ema_update<T: Real>(ema: &mut [Tensor<T>], params: &ParamStore<T>, t: u64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(shape_err(
            "ema_update",
            format!("{} EMA tensors for {} params", ema.len(), params.len()),
        ));
    }
    let k = T::lit(1.0 - ema_decay(t));
    for (e, p) in ema.iter_mut().zip(params.iter()) {
        if e.shape() != p.value.shape() {
            return Err(shape_err("ema_update", format!("{}: shape", p.name)));
        }
        for (a, &b) in e.data_mut().iter_mut().zip(p.value.data()) {
            *a += k * (b - *a);
        }
    }
    Ok(())
}

/// LARS with the same momentum buffers: per parameter,
/// `local_lr = trust·‖W‖ / max(‖G̃‖, 1e-9)`, `v ← μv + local_lr·G̃`, `θ ← θ − lr·v`.
/// Parameters that are not weight-decayed (gains, biases, SkipInit scalars)
/// skip the trust ratio and take a plain momentum step, since a zero-initialized
/// scalar would otherwise never move.
pub fn lars_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64, trust: f64) -> Result<()> {
    if trust <= 0.0 {
        return Err(Error::Config(format!("trust coefficient must be > 0, got {trust}")));
    }
    let (mu, wd, lr_t) = (T::lit(state.momentum), T::lit(state.weight_decay), T::lit(lr));
    for (i, p) in store.iter_mut().enumerate() {
        let decay = p.flags.weight_decayed;
        let gt: Vec<T> = p
            .grad
            .data()
            .iter()
            .zip(p.value.data())
            .map(|(&g, &w)| if decay { g + wd * w } else { g })
            .collect();
        let local = if decay {
            let gn = gt.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            T::lit(lars_local_lr(p.value.l2_norm().f64(), gn.f64(), trust))
        } else {
            T::one()
        };
        let v = state.buffer(i, p.value.shape())?;
        for ((vj, theta), &g) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(&gt) {
            *vj = mu * *vj + local * g;
            *theta -= lr_t * *vj;
        }
    }
    Ok(())
}

/// `trust·‖W‖ / max(‖G‖, 1e-9)`.
pub fn lars_local_lr(w_norm: f64, g_norm: f64, trust: f64) -> f64 {
    trust * w_norm / g_norm.max(1e-9)
}

/// Phases of one training step, in the order they must occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Forward,
    Backward,
    Clip,
    Update,
    Ema,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub clip: ClipReport,
}

/// Settings shared by every step of a run.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub clip: ClipConfig,
    pub check_finite: bool,
    pub use_ema: bool,
}

fn backward_pass<T: Real>(
    store: &mut ParamStore<T>,
    check_finite: bool,
    forward: impl FnOnce(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<f64> {
    let mut tape = Tape::new().with_finite_check(check_finite);
    let loss = forward(&mut tape, store)?;
    hook(StepPhase::Forward);
    let value = tape.value(loss).item().f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    tape.backward(loss, store)?;
    hook(StepPhase::Backward);
    Ok(value)
}

fn finish_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    opts: &StepOptions,
    lr: f64,
    loss: f64,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<StepOutcome> {
    let grad_norm = store.grad_global_norm().f64();
    if opts.check_finite && !grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "backward" });
    }
    let clip = clip_store(store, &opts.clip)?;
    hook(StepPhase::Clip);
    sgd_nesterov_step(store, state, lr)?;
    hook(StepPhase::Update);
    if opts.check_finite && !store.iter().all(|p| p.value.all_finite()) {
        return Err(Error::NonFinite { op: "update" });
    }
    if opts.use_ema {
        let ema = state.ema.get_or_insert_with(|| store.values());
        ema_update(ema, store, state.step)?;
        hook(StepPhase::Ema);
    }
    state.step += 1;
    Ok(StepOutcome { loss, grad_norm, clip })
}

/// forward → backward → clip → SGD → EMA.
pub fn train_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    opts: &StepOptions,
    lr: f64,
    forward: impl FnOnce(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<StepOutcome> {
    let loss = backward_pass(store, opts.check_finite, forward, hook)?;
    finish_step(store, state, opts, lr, loss, hook)
}

/// Number of leading examples used for the SAM ascent gradient.
pub fn sam_ascent_size(batch: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "ascent fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = (fraction * batch as f64 - 1e-9).ceil() as usize;
    if n == 0 {
        return Err(Error::Config("empty SAM ascent subset".into()));
    }
    Ok(n.min(batch))
}

/// Reduced-batch SAM: ascend along the normalized gradient of the first
/// `⌈fraction·B⌉` examples, take the full-batch gradient there, then apply it
/// at the original parameters. `loss` receives the example range to use.
/// Returns the step outcome and the L2 norm of the applied perturbation.
#[allow(clippy::too_many_arguments)]
pub fn sam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    opts: &StepOptions,
    lr: f64,
    batch: usize,
    ascent_fraction: f64,
    loss: impl Fn(&mut Tape<T>, &ParamStore<T>, Range<usize>) -> Result<Var>,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<(StepOutcome, f64)> {
    let rho = state.sam_rho;
    if rho < 0.0 {
        return Err(Error::Config(format!("SAM radius must be >= 0, got {rho}")));
    }
    let n = sam_ascent_size(batch, ascent_fraction)?;
    backward_pass(store, opts.check_finite, |t, s| loss(t, s, 0..n), &mut |_| {})?;
    let norm = store.grad_global_norm();
    let original = store.values();
    let mut applied = 0.0;
    if rho > 0.0 && norm > T::zero() {
        let k = T::lit(rho) / norm;
        let mut sq = T::zero();
        for p in store.iter_mut() {
            for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                let e = k * g;
                sq += e * e;
                *w += e;
            }
        }
        applied = sq.sqrt().f64();
    }
    let descent = backward_pass(store, opts.check_finite, |t, s| loss(t, s, 0..batch), hook);
    for (p, v) in store.iter_mut().zip(original) {
        p.value = v;
    }
    let value = descent?;
    let out = finish_step(store, state, opts, lr, value, hook)?;
    Ok((out, applied))
}
