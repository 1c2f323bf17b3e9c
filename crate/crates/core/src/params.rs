//! Named parameter storage and the per-pass [`Session`] that binds it to a tape.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// Persistent state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Input(format!("duplicate parameter {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.entries[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        let i = self.position(name)?;
        Ok(&mut self.entries[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// L2 norm of all trainable gradients, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        self.trainable()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let v = g.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every trainable gradient so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = T::from_f64_lossy(max_norm / norm);
            for p in self.entries.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }

    /// Snapshot of all values keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.kind, p.value.cast()).expect("names are unique");
        }
        out
    }

    fn pair_mut(&mut self, a: usize, b: usize) -> (&mut Param<T>, &mut Param<T>) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.entries.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.entries.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }
}

/// Weight initialisers. All draw from a caller-owned seeded generator.
pub mod init {
    use super::*;

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        uniform(shape, bound, rng)
    }

    pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }
}

/// Registers a batch-norm layer (`gamma`, `beta`, running statistics).
pub fn add_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), ParamKind::Trainable, Tensor::ones([d]))?;
    store.insert(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros([d]))?;
    store.insert(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros([d]))?;
    store.insert(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones([d]))?;
    Ok(())
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are copied onto the tape on first use; [`Session::backward`]
/// adds the resulting gradients into the store's gradient buffers, so the
/// caller must [`ParamStore::zero_grad`] between optimiser steps.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: HashMap<String, Var>,
    train: bool,
    capture: Option<String>,
    captured: BTreeMap<String, Var>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            train,
            capture: None,
            captured: BTreeMap::new(),
        }
    }

    /// Continues recording onto an existing tape.
    pub fn with_graph(graph: Graph<T>, store: &'s mut ParamStore<T>, train: bool) -> Self {
        Self { graph, ..Self::new(store, train) }
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    /// Uses `v` for parameter `name` instead of copying the stored value.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let want = self.store.value(name)?.shape();
        if want != self.graph.shape(v) {
            return Err(Error::shape(format!(
                "binding {name}: expected {want:?}, got {:?}",
                self.graph.shape(v)
            )));
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape handle for a named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.value(name)?.clone();
        let v = self.graph.variable(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Batch norm using the `{prefix}.*` parameters; running statistics are
    /// updated in train mode and used as-is in eval mode.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let im = self.store.position(&format!("{prefix}.running_mean"))?;
        let iv = self.store.position(&format!("{prefix}.running_var"))?;
        let (mean, var) = self.store.pair_mut(im, iv);
        let stats = BnStats {
            mean: mean.value.data_mut(),
            var: var.value.data_mut(),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        self.graph.batch_norm(x, gamma, beta, stats, self.train)
    }

    /// `x W + b` with `{prefix}.weight` / `{prefix}.bias`.
    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let y = self.graph.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}.bias"))?;
            self.graph.add_bias(y, b)
        } else {
            Ok(y)
        }
    }

    /// Only intermediates of the module named `prefix` are recorded by [`Session::capture`].
    pub fn set_capture(&mut self, prefix: Option<String>) {
        self.capture = prefix;
    }

    pub fn capture(&mut self, module: &str, what: &str, v: Var) {
        if self.capture.as_deref() == Some(module) {
            self.captured.insert(what.to_string(), v);
        }
    }

    pub fn captured(&self) -> &BTreeMap<String, Var> {
        &self.captured
    }

    /// Back-propagates `loss` and accumulates parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(g) = self.graph.grad_slice(v) {
                let p = self.store.get_mut(name)?;
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }
}
