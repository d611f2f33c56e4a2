use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Gradients, Scalar, Tape, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub has_grad: bool,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step: u64,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let n = value.numel();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: vec![T::zero(); n],
            has_grad: false,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the gradients of every parameter leaf on `tape` into the
    /// stored gradient buffers.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.param_vars() {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[id.0];
                p.grad.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                p.has_grad = true;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
            p.has_grad = false;
        }
    }

    /// Clears Adam moments and step counters (fresh optimizer on warm start).
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.adam_m.iter_mut().for_each(|g| *g = T::zero());
            p.adam_v.iter_mut().for_each(|g| *g = T::zero());
            p.step = 0;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Copy of the store in another precision; optimizer state included.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: conv(&p.grad),
                    has_grad: p.has_grad,
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                    step: p.step,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Updates every parameter that received a gradient, then zeroes all
    /// gradients. Parameters without a gradient are left untouched.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.params.iter().any(|p| p.has_grad) {
            return Err(Error::State("adam step without any accumulated gradient".into()));
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let eps = T::of(self.eps);
        for p in store.params.iter_mut().filter(|p| p.has_grad) {
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::of(1.0 - self.beta1.powi(t));
            let c2 = T::of(1.0 - self.beta2.powi(t));
            let lr = T::of(self.lr);
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = p.grad[i];
                p.adam_m[i] = b1 * p.adam_m[i] + one_b1 * g;
                p.adam_v[i] = b2 * p.adam_v[i] + one_b2 * g * g;
                let mhat = p.adam_m[i] / c1;
                let vhat = p.adam_v[i] / c2;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
