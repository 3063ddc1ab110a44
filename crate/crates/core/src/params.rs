//! Named parameter storage and the small layer records built on it.

use std::ops::Index;

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::Result;
use crate::ssm::{SsmLearned, SsmVars};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

/// Parameters in registration order. Names are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Records every parameter on `tape`, in registration order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }
}

/// A [`ParamStore`] recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Vars in the registration order of the store they stand for.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients after `backward`, in registration order; zeros where no
    /// gradient reached a parameter.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([dim]), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([dim]), false),
        }
    }

    /// Normalizes the last axis.
    pub fn apply<'t, T: Real>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(b[self.gamma], b[self.beta], LAYER_NORM_EPS)
    }
}

/// One direction's selective-scan parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmIds {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub x_proj: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
}

impl SsmIds {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, init: SsmLearned<T>) -> Self {
        Self {
            a_log: store.add(format!("{prefix}.A_log"), init.a_log, false),
            d_skip: store.add(format!("{prefix}.D"), init.d_skip, false),
            x_proj: store.add(format!("{prefix}.x_proj"), init.x_proj, true),
            dt_proj: store.add(format!("{prefix}.dt_proj"), init.dt_proj, true),
            dt_bias: store.add(format!("{prefix}.dt_bias"), init.dt_bias, false),
        }
    }

    pub fn bind<'t, T: Real>(&self, b: &Bound<'t, T>) -> SsmVars<'t, T> {
        SsmVars {
            a_log: b[self.a_log],
            d_skip: b[self.d_skip],
            x_proj: b[self.x_proj],
            dt_proj: b[self.dt_proj],
            dt_bias: b[self.dt_bias],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_binds_in_order_and_collects_grads() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones([2]), true);
        let b = store.add("b", Tensor::full([3], 2.0), false);
        assert_eq!(store.num_scalars(), 5);
        assert_eq!(store.find("b"), Some(b));
        let tape = Tape::new();
        let bound = store.bind(&tape, true);
        tape.backward(bound[a].sum().scale(3.0)).unwrap();
        let grads = bound.grads();
        assert_eq!(grads[0].data(), &[3.0, 3.0]);
        assert_eq!(grads[1].data(), &[0.0; 3]);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::ones([1]), true);
        store.add("w", Tensor::ones([1]), true);
    }
}
