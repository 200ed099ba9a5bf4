use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Role flags that decide how optimizers and clipping treat a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamFlags {
    pub weight_standardized: bool,
    pub agc_clipped: bool,
    pub weight_decayed: bool,
    pub is_classifier_weight: bool,
}

impl ParamFlags {
    /// Raw weight of a scaled-WS convolution.
    pub fn ws_weight() -> Self {
        Self {
            weight_standardized: true,
            agc_clipped: true,
            weight_decayed: true,
            is_classifier_weight: false,
        }
    }

    /// Plain (unstandardized) dense or conv weight.
    pub fn weight() -> Self {
        Self {
            weight_standardized: false,
            agc_clipped: true,
            weight_decayed: true,
            is_classifier_weight: false,
        }
    }

    /// Affine gains, biases and SkipInit scalars: clipped, never decayed.
    pub fn gain_or_bias() -> Self {
        Self {
            weight_standardized: false,
            agc_clipped: true,
            weight_decayed: false,
            is_classifier_weight: false,
        }
    }

    /// Classifier weight: decayed, excluded from AGC.
    pub fn classifier_weight() -> Self {
        Self {
            weight_standardized: false,
            agc_clipped: false,
            weight_decayed: true,
            is_classifier_weight: true,
        }
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Always allocated; zeroed at the start of each backward pass.
    pub grad: Tensor<T>,
    pub flags: ParamFlags,
    /// Axis that indexes units (output channels / rows). `None` means the
    /// whole tensor is a single unit, which is how scalars and vectors are
    /// treated.
    pub unit_axis: Option<usize>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, flags: ParamFlags) -> Self {
        let unit_axis = if value.rank() >= 2 { Some(0) } else { None };
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            flags,
            unit_axis,
        }
    }
}

/// Owns every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, param: Parameter<T>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                op: "set_grads",
                detail: format!("{} grads for {} params", grads.len(), self.params.len()),
            });
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "set_grads",
                    detail: format!("{}: {:?} vs {:?}", p.name, g.shape(), p.value.shape()),
                });
            }
            p.grad = g;
        }
        Ok(())
    }

    /// Global L2 norm over every gradient entry.
    pub fn grad_global_norm(&self) -> T {
        self.params
            .iter()
            .fold(T::zero(), |acc, p| acc + p.grad.sum_sq())
            .sqrt()
    }

    /// Copy of this store in another precision (flags and names preserved,
    /// gradients reset).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    flags: p.flags,
                    unit_axis: p.unit_axis,
                })
                .collect(),
        }
    }
}
