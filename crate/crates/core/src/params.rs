//! Named parameter storage and the forward-pass context shared by all models.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated from batch statistics, never by gradients.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

/// Ordered, named tensors of one model component.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    prefix: String,
    entries: Vec<ParamEntry<T>>,
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Fan-in scaled normal weights, zero biases, unit batch-norm scale.
    Default,
    /// Every trainable tensor zero (test hook for degenerate checks).
    Zeros,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            entries: Vec::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = format!("{}.{}", self.prefix, name.into());
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate {name}");
        self.entries.push(ParamEntry {
            name,
            kind,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Same names and shapes, values converted.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            prefix: self.prefix.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: Arc::new(e.value.cast()),
                })
                .collect(),
        }
    }

    /// Replace values by name from another store of identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch for {}: {} vs {}",
                self.prefix,
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = Arc::clone(&src.value);
        }
        Ok(())
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }
}

/// Deterministic initialiser shared by the model constructors.
pub struct Initializer {
    rng: ChaCha8Rng,
    init: Init,
}

impl Initializer {
    pub fn new(seed: u64, init: Init) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            init,
        }
    }

    /// Normal weights with std `sqrt(gain / fan_in)`.
    pub fn weight<T: Scalar>(&mut self, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match self.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Default => {
                let std = (gain / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::of(normal.sample(&mut self.rng))).collect()
            }
        };
        Tensor::new(shape, data).expect("init shape")
    }

    pub fn zeros<T: Scalar>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Scalar>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Default => Tensor::full(shape, T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update recorded by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub store: String,
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// One forward pass: the tape, the mode, the dropout stream and the
/// parameter leaves bound so far.
pub struct Ctx<T> {
    pub graph: Graph<T>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    bound: HashMap<(String, usize), Var>,
    frozen: Vec<String>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Ctx<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
            frozen: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Parameters of stores with this prefix are bound without gradients.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Dropout drawing its mask from this pass's stream.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        self.graph.dropout(x, p, &mut self.rng)
    }

    pub fn random_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Leaf for a stored parameter; bound once per pass.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.prefix.clone(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = store.entries[id.0].kind == ParamKind::Trainable
            && !self.frozen.iter().any(|f| f == &store.prefix);
        let v = self.graph.leaf_shared(store.shared(id), trainable);
        self.bound.insert(key, v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.leaf(value, false)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Variable bound for a parameter in this pass, if any.
    pub fn bound(&self, store: &ParamStore<T>, id: ParamId) -> Option<Var> {
        self.bound.get(&(store.prefix.clone(), id.0)).copied()
    }
}

/// Fold recorded batch statistics into a store's running buffers.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::of(momentum);
    let prefix = store.prefix.clone();
    for u in updates.iter().filter(|u| u.store == prefix) {
        for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let t = store.get_mut(id);
            for (r, &b) in t.data_mut().iter_mut().zip(fresh) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}
