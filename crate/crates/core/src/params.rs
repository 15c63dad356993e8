//! Trainable parameters, batch-norm buffers, and the forward context that
//! binds them to a tape.

use std::collections::HashMap;

use crate::autograd::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Registry of every trainable tensor and every running-statistics buffer.
/// Names are unique and hierarchical (`encoder.db1.layer0.conv1.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, RunningStats)>,
    names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.names.insert(name.clone(), self.params.len()).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, stats: RunningStats) -> BufferId {
        self.buffers.push((name.into(), stats));
        BufferId(self.buffers.len() - 1)
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
        self.names.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.buffers.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub(crate) fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats)> {
        self.buffers.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total trainable scalars; running statistics are excluded.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    pub fn snapshot_buffers(&self) -> Vec<RunningStats> {
        self.buffers.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn restore_buffers(&mut self, saved: Vec<RunningStats>) {
        for ((_, slot), s) in self.buffers.iter_mut().zip(saved) {
            *slot = s;
        }
    }
}

/// Anything that owns parameters in a [`ParamStore`].
pub trait Module {
    fn collect_params(&self, out: &mut Vec<ParamId>);

    fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    /// Exact number of trainable scalars owned by this module.
    fn param_count(&self, store: &ParamStore) -> usize {
        store.count(&self.param_ids())
    }
}

/// Gradients of a loss with respect to stored parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }
}

/// One forward pass: a tape plus the store its parameters come from.
/// Each parameter becomes a single leaf, so reuse accumulates gradients.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    mode: Mode,
    leaves: HashMap<ParamId, Var>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    /// Eval-mode pass that records no gradients.
    pub fn inference(store: &'s mut ParamStore) -> Self {
        Self::with_tape(store, Mode::Eval, Tape::no_grad())
    }

    pub fn with_tape(store: &'s mut ParamStore, mode: Mode, tape: Tape) -> Self {
        Ctx {
            tape,
            store,
            mode,
            leaves: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), true);
        self.leaves.insert(id, v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: BufferId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let train = self.mode == Mode::Train;
        let stats = self.store.buffer_mut(stats);
        self.tape.batch_norm(x, g, b, stats, train)
    }

    /// Runs the reverse sweep and collects gradients of every parameter
    /// that took part in the forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        let mut grads = Gradients::default();
        for (&id, &v) in &self.leaves {
            if let Some(g) = self.tape.grad(v) {
                grads.insert(id, g.clone());
            }
        }
        Ok(grads)
    }

    pub fn require_all(&self, grads: &Gradients) -> Result<()> {
        for id in self.store.ids() {
            if grads.get(id).is_none() {
                return Err(Error::MissingGrad(self.store.name(id).to_string()));
            }
        }
        Ok(())
    }
}
