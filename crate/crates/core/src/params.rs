//! Named parameter storage, parameter groups and the per-pass forward context.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{central_difference, compare_gradients, GradCheckReport, Gradients, Tape, Tensor, Var};

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Backbone weights; never updated.
    Frozen,
    /// Visual and text prompts.
    Prompt,
    /// Mapper, adapters, projector and temporal embeddings.
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Flat registry of every parameter in a model. Discarded slots stay
/// allocated so that ids remain stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<Param>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.slots.push(Some(Param {
            name: name.into(),
            group,
            value,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> Result<&Param> {
        self.slots
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("parameter #{} was discarded", id.0)))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.param(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].as_mut().expect("live parameter").value
    }

    fn param(&self, id: ParamId) -> &Param {
        self.slots[id.0].as_ref().expect("live parameter")
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = self.get(id)?;
        if current.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", current.value.shape(), value.shape()));
        }
        self.value_mut(id).clone_from(&value);
        Ok(())
    }

    pub fn discard(&mut self, id: ParamId) {
        if let Some(slot) = self.slots.get_mut(id.0) {
            *slot = None;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Number of scalar entries in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.iter().filter(|(_, p)| p.group == group).map(|(_, p)| p.value.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.iter().map(|(_, p)| p.value.len()).sum()
    }
}

/// The set of groups whose parameters are differentiated in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradGroups {
    pub frozen: bool,
    pub prompt: bool,
    pub rest: bool,
}

impl GradGroups {
    pub const NONE: GradGroups = GradGroups { frozen: false, prompt: false, rest: false };
    pub const ALL: GradGroups = GradGroups { frozen: true, prompt: true, rest: true };
    pub const TRAINABLE: GradGroups = GradGroups { frozen: false, prompt: true, rest: true };
    pub const PROMPTS: GradGroups = GradGroups { frozen: false, prompt: true, rest: false };

    pub fn contains(&self, group: Group) -> bool {
        match group {
            Group::Frozen => self.frozen,
            Group::Prompt => self.prompt,
            Group::Rest => self.rest,
        }
    }
}

/// Forward-pass context: a tape, lazily bound parameters and the dropout RNG.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    grads: GradGroups,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Inference context: nothing requires a gradient, dropout is off.
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self::new(tape, store, GradGroups::NONE, None)
    }

    /// Training context with dropout driven by `seed`.
    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, grads: GradGroups, seed: u64) -> Self {
        Self::new(tape, store, grads, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Deterministic context (no dropout) differentiating `grads`.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, grads: GradGroups, dropout_rng: Option<ChaCha8Rng>) -> Self {
        Ctx {
            tape,
            store,
            bound: Vec::new(),
            grads,
            dropout_rng,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Tape variable for parameter `id`, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return Ok(*v);
        }
        let param = self.store.get(id)?;
        let var = self.tape.leaf(param.value.clone(), self.grads.contains(param.group));
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(var);
        Ok(var)
    }

    /// Dropout with probability `p` in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.dropout_rng.as_mut() {
            Some(rng) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    /// Parameters bound so far, with their tape variables.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

/// Collects parameter gradients after a backward pass.
pub fn param_grads(bindings: &[(ParamId, Var)], grads: &Gradients) -> Vec<(ParamId, Tensor)> {
    bindings
        .iter()
        .filter_map(|&(id, v)| grads.get(v).map(|g| (id, g.clone())))
        .collect()
}

/// Finite-difference check of `d loss / d params` for the listed parameters,
/// with every group differentiated and dropout off.
pub fn check_param_grads<F>(store: &ParamStore, ids: &[ParamId], loss: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, store);
        let y = loss(&mut cx)?;
        crate::tensor::gradcheck_scalar(&tape, y)
    };

    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, GradGroups::ALL, None);
    let y = loss(&mut cx)?;
    let bindings = cx.bindings();
    crate::tensor::gradcheck_scalar(&tape, y)?;
    let grads = tape.backward(y)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for &id in ids {
        let base = store.value(id).clone();
        match bindings.iter().find(|(pid, _)| *pid == id).and_then(|(_, v)| grads.get(*v)) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, base.len())),
        }
        let fd = central_difference(
            |values| {
                probe.value_mut(id).data_mut().copy_from_slice(values);
                eval(&probe)
            },
            base.data(),
            eps,
        )?;
        probe.value_mut(id).data_mut().copy_from_slice(base.data());
        numeric.extend(fd);
    }
    Ok(compare_gradients(&analytic, &numeric, tol))
}
