//! Named parameter trees and their binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero-filled copy with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Sets every value to zero.
    pub fn zero_values(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copy without gradient state.
    pub fn detached(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.detached()))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix.`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Adds `prefix.` to every name and moves the entries into `into`.
    pub fn merge_prefixed(&self, prefix: &str, into: &mut ParamStore) {
        for (k, v) in &self.tensors {
            into.insert(format!("{prefix}.{k}"), v.clone());
        }
    }
}

/// Draws initial parameter values.
pub struct Initializer<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Initializer<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Initializer { rng }
    }

    /// Weight `[fan_in, fan_out]` uniform in `±1/√fan_in`, zero bias.
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        store.insert(
            format!("{name}.w"),
            Tensor::new(&[fan_in, fan_out], data).expect("linear shape"),
        );
        if bias {
            store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn layernorm(&mut self, store: &mut ParamStore, name: &str, dim: usize) {
        store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }

    pub fn normal(&mut self, store: &mut ParamStore, name: &str, shape: &[usize], std: f64) {
        let numel = shape.iter().product();
        let data = if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..numel).map(|_| dist.sample(self.rng)).collect()
        } else {
            vec![0.0; numel]
        };
        store.insert(name, Tensor::new(shape, data).expect("normal shape"));
    }
}

/// Puts the tensors of one [`ParamStore`] on a tape, once each, on demand.
pub struct Binder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'a> Binder<'a> {
    /// `trainable` leaves take part in backward; frozen ones are constants.
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            tape,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
            dropout_rng: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(RefCell::new(rng));
        self
    }

    /// Inverted dropout with rate `p`; identity unless enabled.
    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = &self.dropout_rng else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x)?;
        let numel = shape.iter().product();
        let mut rng = rng.borrow_mut();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(Tensor::new(&shape, mask)?)?;
        self.tape.mul(x, mask)
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.require(name)?;
        let v = self.tape.leaf(t.clone(), self.trainable)?;
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter; unbound or unreached ones are zero.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        let bound = self.bound.borrow();
        let mut out = self.store.zeros_like();
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.detached());
            }
        }
        out
    }
}
