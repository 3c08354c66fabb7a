use std::collections::HashMap;

use super::dense::Dense;
use super::rng::Rng;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A learnable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Dense<T>,
    pub grad: Dense<T>,
    m: Dense<T>,
    v: Dense<T>,
    step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Dense<T>) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Dense::zeros(r, c),
            m: Dense::zeros(r, c),
            v: Dense::zeros(r, c),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Dense<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &Dense<T> {
        &self.v
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// One bias-corrected Adam update. The gradient buffer is left as is.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter `{}`", self.name)));
        }
        self.step += 1;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let bc1 = T::of(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - cfg.beta2.powi(self.step as i32));
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        let one = T::one();
        let g = self.grad.as_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        let x = self.value.as_mut_slice();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            x[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
            step: self.step,
        }
    }
}

/// Xavier/Glorot uniform initialization in `±sqrt(6 / (rows + cols))`.
pub fn xavier_init<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Dense<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Dense::from_fn(rows, cols, |_, _| T::of(rng.uniform_range(-bound, bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Dense<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        id
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

    pub fn value(&self, id: ParamId) -> &Dense<T> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in &mut self.params {
            p.adam_step(cfg)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(Parameter::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Dense<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter `{name}`")))?;
        let p = self.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                expected: format!("{:?} for `{name}`", p.value.shape()),
                actual: format!("{:?}", value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }
}
