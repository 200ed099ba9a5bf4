//! Nonlinearity gains γ such that γ·g(x) has unit variance for x ~ N(0, 1).
//!
//! ReLU has a closed form. GELU and SiLU constants were produced by a
//! fixed-seed Monte-Carlo estimate `1 / std(g(x))` over 10⁷ samples; the
//! estimator lives in `tests/gains.rs` and must reproduce them within 0.2%.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// γ for ReLU: `√(2 / (1 − 1/π))`.
pub fn relu_gamma() -> f64 {
    (2.0 / (1.0 - 1.0 / PI)).sqrt()
}

/// Monte-Carlo γ for exact (erf) GELU.
pub const GELU_GAMMA: f64 = 1.700_898;
/// Monte-Carlo γ for SiLU.
pub const SILU_GAMMA: f64 = 1.787_129;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Relu,
        Activation::Gelu,
        Activation::Silu,
    ];

    /// Unscaled nonlinearity `g(x)`.
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => x * T::lit(normal_cdf(x.f64())),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// `g'(x)`; ReLU uses 0 at the kink.
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let xf = x.f64();
                let pdf = (-0.5 * xf * xf).exp() / (2.0 * PI).sqrt();
                T::lit(normal_cdf(xf) + xf * pdf)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
        }
    }

    /// The frozen gain for this kind.
    pub fn gamma(self) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => relu_gamma(),
            Activation::Gelu => GELU_GAMMA,
            Activation::Silu => SILU_GAMMA,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" | "swish" => Ok(Activation::Silu),
            other => Err(Error::Unsupported(format!("activation `{other}`"))),
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// γ paired with its nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityGain {
    pub kind: Activation,
    pub gamma: f64,
}

impl NonlinearityGain {
    pub fn new(kind: Activation) -> Self {
        Self {
            kind,
            gamma: gamma_for(kind),
        }
    }

    /// Same nonlinearity with an arbitrary positive gain.
    pub fn with_gamma(kind: Activation, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { kind, gamma })
    }

    /// Elementwise `γ·g(x)` recorded on the tape.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.activation(x, self.kind, T::lit(self.gamma))
    }

    /// Elementwise `γ·g(x)` without a tape.
    pub fn eval_tensor<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = T::lit(self.gamma);
        x.map(|v| g * self.kind.eval(v))
    }
}

pub fn gamma_for(kind: Activation) -> f64 {
    kind.gamma()
}

/// `γ·g(x)` for the kind's frozen γ, recorded on the tape.
pub fn scaled_activation<T: Real>(tape: &mut Tape<T>, x: Var, kind: Activation) -> Result<Var> {
    NonlinearityGain::new(kind).apply(tape, x)
}
