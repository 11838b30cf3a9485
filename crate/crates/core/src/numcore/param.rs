use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor plus its AdamW moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Self {
        let n = tensor.len();
        Parameter {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            decay,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// Ordered, name-unique collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Adds `scale * grad` into the named parameter's gradient.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T], scale: T) {
        let scaled: Vec<T> = grad.iter().map(|&g| g * scale).collect();
        self.params[id.0].tensor.accumulate_grad(&scaled);
    }
}
