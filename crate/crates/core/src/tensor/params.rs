use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("adam {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Ordered collection of named trainable tensors with Adam state.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    moments: Vec<Moments<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new(), moments: Vec::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.moments.push(Moments { m: vec![T::zero(); t.numel()], v: vec![T::zero(); t.numel()] });
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Number of Adam steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Value copy in another precision; optimiser state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast()).expect("names are unique");
        }
        out
    }

    /// One bias-corrected Adam update. `grads` must follow store order.
    pub fn adam_step(&mut self, grads: &[Tensor<T>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(shape_err(format!("{} gradients for {} parameters", grads.len(), self.tensors.len())));
        }
        for (i, (g, p)) in grads.iter().zip(&self.tensors).enumerate() {
            if g.shape() != p.shape() {
                return Err(shape_err(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    self.names[i],
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for ((p, g), mom) in self.tensors.iter_mut().zip(grads).zip(&mut self.moments) {
            for (((w, &gv), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut mom.m).zip(&mut mom.v) {
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
