//! Parameter storage and per-pass binding of parameters onto a tape.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Non-trainable entries are buffers such as running statistics.
    pub trainable: bool,
}

/// Named tensors owned by a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Dim(format!(
                "parameter {} has shape {:?}, new value {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).map(ParamId).collect()
    }

    /// Replaces all values from named tensors, checking names and shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter_mut().zip(named) {
            if &e.name != name || e.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

/// One forward pass: the tape, bound parameter vars, mode and randomness.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    train: bool,
    rng: Rng,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'t> Ctx<'t> {
    /// Binds every entry of `store` as a leaf; trainable entries require a
    /// gradient when `train` is set and the tape records gradients.
    pub fn new(tape: &'t Tape, store: &ParamStore, train: bool, rng: Rng) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable && tape.grad_enabled()))
            .collect();
        Self { tape, vars, train, rng, updates: Vec::new() }
    }

    pub fn eval(tape: &'t Tape, store: &ParamStore) -> Self {
        Self::new(tape, store, false, Rng::new(0))
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Queues a buffer update (e.g. running statistics) to apply after the step.
    pub fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradient per store entry (None for buffers).
    pub fn grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .zip(&store.entries)
            .map(|(v, e)| if e.trainable { grads.get(*v).cloned() } else { None })
            .collect()
    }
}

pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}
