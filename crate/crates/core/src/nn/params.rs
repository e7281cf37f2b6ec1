//! Named parameter storage and per-forward binding.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor. Trainable entries carry a gradient buffer; buffers such
/// as batch-norm running statistics do not.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(value.shape()),
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(F::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Registers parameters under a hierarchical name prefix and initializes
/// them from a seeded generator.
pub struct ParamBuilder<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, F: Scalar> ParamBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: &str) {
        self.prefix.push(scope.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside `scope`.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::lit(self.rng.random_range(-bound..=bound)))
            .collect();
        let name = self.full_name(name);
        self.store.insert(&name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(dist.sample(&mut self.rng))).collect();
        let name = self.full_name(name);
        self.store.insert(&name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> Result<ParamId> {
        let name = self.full_name(name);
        self.store
            .insert(&name, Tensor::filled(shape, F::lit(v)), trainable)
    }
}

/// One evaluation of a scalar function for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// Identifies the smooth piece the evaluation lies on; see
    /// [`Graph::branch_signature`].
    pub signature: u64,
}

impl Probe {
    /// A probe of a function without branches.
    pub fn smooth(loss: f64) -> Self {
        Self { loss, signature: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh graph with parameters bound as leaves.
///
/// Each parameter enters the graph at most once; after `backward` the
/// gradients are added into the store's gradient buffers.
pub struct Ctx<'a, F: Scalar> {
    pub graph: Graph<F>,
    pub store: &'a mut ParamStore<F>,
    pub mode: Mode,
    bound: HashMap<ParamId, Var>,
    dropout_rng: ChaCha8Rng,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            bound: HashMap::new(),
            dropout_rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.graph.leaf(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    pub(crate) fn dropout_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.dropout_rng
    }

    /// Reads the scalar `loss`, optionally back-propagates it, and records
    /// the branch signature of the graph; the shape expected by
    /// [`grad_check`](super::grad_check).
    pub fn probe(&mut self, loss: Var, backward: bool) -> Probe {
        let value = self.graph.value(loss).data()[0].as_f64();
        if backward {
            self.backward(loss);
        }
        Probe {
            loss: value,
            signature: self.graph.branch_signature(),
        }
    }

    /// Back-propagates from the scalar `loss` and adds the parameter
    /// gradients into the store.
    pub fn backward(&mut self, loss: Var) {
        let grads = self.graph.backward(loss);
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                let p = self.store.get_mut(id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}
