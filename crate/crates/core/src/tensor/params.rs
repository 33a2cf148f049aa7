use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Gradients, Graph, Var};
use super::ops::BnStats;
use super::{Shape, Tensor};

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Names are kept sorted so iteration order is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown buffer '{name}'")))
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(crate::error::dim_err(
                "ParamStore::set",
                format!("'{name}' has shape {}, got {}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown buffer '{name}'")))?;
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds batch statistics into the running buffers:
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, updates: &[(String, BnStats)], momentum: f64) -> Result<()> {
        for (name, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let key = format!("{name}.{suffix}");
                let cur = self.buffer(&key)?;
                let next: Vec<f64> = cur
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect();
                let shape = cur.shape();
                self.set_buffer(&key, Tensor::new(shape, next)?)?;
            }
        }
        Ok(())
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: Shape, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; parameters are differentiable leaves.
    Train,
    /// Running statistics; parameters are constants.
    Eval,
}

/// Binds a snapshot of a [`ParamStore`] onto a graph for one forward pass.
/// The snapshot shares tensor storage with the store, so taking it is cheap.
pub struct Session<'g> {
    graph: &'g Graph,
    store: ParamStore,
    mode: Mode,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
    bn_updates: RefCell<Vec<(String, BnStats)>>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph, store: &ParamStore, mode: Mode) -> Self {
        Session {
            graph,
            store: store.clone(),
            mode,
            bound: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Pre-binds a parameter to an existing node (used by gradient checks
    /// that perturb parameters from the outside).
    pub fn bind(&self, name: &str, var: Var<'g>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = match self.mode {
            Mode::Train => self.graph.leaf(t),
            Mode::Eval => self.graph.constant(t),
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.store.buffer(name)
    }

    pub(crate) fn record_bn(&self, name: &str, stats: BnStats) {
        self.bn_updates.borrow_mut().push((name.to_string(), stats));
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BnStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Number of parameters touched so far.
    pub fn bound_count(&self) -> usize {
        self.bound.borrow().len()
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}
