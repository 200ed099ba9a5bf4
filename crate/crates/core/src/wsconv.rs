//! Scaled weight standardization: convolutions and dense layers whose weight
//! is re-standardized per output unit on every forward pass,
//! `Ŵᵢ = gᵢ · (Wᵢ − μᵢ) / (√N σᵢ)`, followed by a per-unit bias.
//!
//! The standardization is part of the differentiable graph, so gradients
//! flow through μᵢ and σᵢ.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, ParamFlags, ParamId, ParamStore, Parameter, Real, Tape, Tensor, Var};

/// Floor on the per-unit weight variance.
pub const EPS_VAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(Conv2dSpec),
    Linear,
}

/// Conv or dense layer with a raw weight, a per-unit gain and a per-unit bias.
///
/// With `standardize == false` the raw weight is used as-is (He-initialized
/// instead), which is the "WS off" configuration used by ablations. Layers
/// that feed straight into batch normalization are built without gain and
/// bias, since normalization cancels both.
#[derive(Debug, Clone)]
pub struct WSLayer {
    pub weight: ParamId,
    pub gain: Option<ParamId>,
    pub bias: Option<ParamId>,
    pub kind: LayerKind,
    pub fan_in: usize,
    pub standardize: bool,
}

impl WSLayer {
    /// `[cout, cin/groups, k, k]` convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn conv<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        standardize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::conv_with_affine(store, name, cin, cout, kernel, spec, standardize, true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_with_affine<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        standardize: bool,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.groups == 0 || !cin.is_multiple_of(spec.groups) || !cout.is_multiple_of(spec.groups) {
            return Err(Error::Config(format!(
                "{name}: {cin}->{cout} channels not divisible into {} groups",
                spec.groups
            )));
        }
        let shape = [cout, cin / spec.groups, kernel, kernel];
        Self::build(store, name, &shape, LayerKind::Conv(spec), standardize, affine, rng)
    }

    /// `[nout, nin]` dense layer.
    pub fn linear<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        nin: usize,
        nout: usize,
        standardize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, &[nout, nin], LayerKind::Linear, standardize, true, rng)
    }

    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: &[usize],
        kind: LayerKind,
        standardize: bool,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let units = shape[0];
        let fan_in: usize = shape[1..].iter().product();
        if standardize && fan_in < 2 {
            return Err(Error::Config(format!(
                "{name}: fan-in {fan_in} < 2 cannot be standardized"
            )));
        }
        let (std, flags) = if standardize {
            ((1.0 / fan_in as f64).sqrt(), ParamFlags::ws_weight())
        } else {
            ((2.0 / fan_in as f64).sqrt(), ParamFlags::weight())
        };
        let weight = store.add(Parameter::new(
            format!("{name}.weight"),
            Tensor::randn(shape, std, rng),
            flags,
        ));
        let gain = affine.then(|| {
            store.add(Parameter::new(
                format!("{name}.gain"),
                Tensor::ones(&[units]),
                ParamFlags::gain_or_bias(),
            ))
        });
        let bias = affine.then(|| {
            store.add(Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(&[units]),
                ParamFlags::gain_or_bias(),
            ))
        });
        Ok(Self {
            weight,
            gain,
            bias,
            kind,
            fan_in,
            standardize,
        })
    }

    pub fn out_units<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).value.shape()[0]
    }

    /// The effective weight `gain ⊙ standardize(W)` recorded on the tape.
    pub fn effective_weight<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let w = if self.standardize {
            tape.standardize(w, T::lit(EPS_VAR))?
        } else {
            w
        };
        match self.gain {
            Some(g) => {
                let g = tape.param(store, g);
                tape.mul_outer(w, g)
            }
            None => Ok(w),
        }
    }
}

/// Tape-free `(W − μ) / (√N σ)` per unit (axis 0) with σ² floored at `eps_var`.
pub fn standardize_weight<T: Real>(w: &Tensor<T>, eps_var: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(w.clone());
    let out = tape.standardize(v, T::lit(eps_var))?;
    Ok(tape.value(out).clone())
}

/// `conv2d(x, gain ⊙ standardize(W)) + bias`, or the dense analogue.
pub fn ws_forward<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, layer: &WSLayer, x: Var) -> Result<Var> {
    let w = layer.effective_weight(tape, store)?;
    let b = layer.bias.map(|b| tape.param(store, b));
    match &layer.kind {
        LayerKind::Conv(spec) => {
            let y = tape.conv2d(x, w, spec)?;
            match b {
                Some(b) => tape.add_channel(y, b),
                None => Ok(y),
            }
        }
        LayerKind::Linear => tape.linear(x, w, b),
    }
}
