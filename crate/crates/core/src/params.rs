//! Named parameter buffers grouped by role.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Index of a buffer in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Role of a parameter buffer. Stage freezing and parameter counting are
/// both expressed in terms of these groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Frozen random feature map standing in for the vision encoder.
    Encoder,
    Projector,
    TokenEmbedding,
    Position,
    Attention,
    /// Dense feed-forward units, including their affine norm.
    Ffn,
    Router,
    Expert,
    FinalNorm,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::TokenEmbedding,
        ParamGroup::Position,
        ParamGroup::Attention,
        ParamGroup::Ffn,
        ParamGroup::Router,
        ParamGroup::Expert,
        ParamGroup::FinalNorm,
        ParamGroup::Head,
    ];

    /// Groups that belong to the language model proper, i.e. the ones the
    /// closed-form parameter count covers.
    pub fn in_language_model(self) -> bool {
        !matches!(self, ParamGroup::Encoder | ParamGroup::Projector | ParamGroup::Position)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count of buffers whose group satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&ParamEntry) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.tensor.len() as u64)
            .sum()
    }

    /// Snapshot of every buffer's values, for freezing checks.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.zero_grad();
                t
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }
}

/// Set of groups that receive gradients and optimizer updates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trainable(BTreeSet<ParamGroup>);

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().copied().collect())
    }

    pub fn all_except(excluded: &[ParamGroup]) -> Self {
        Self(
            ParamGroup::ALL
                .iter()
                .copied()
                .filter(|g| !excluded.contains(g))
                .collect(),
        )
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.0.contains(&g)
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.0.iter().copied()
    }
}

/// Lazily loads parameters onto a tape and routes gradients back.
#[derive(Debug)]
pub struct Bindings {
    trainable: Trainable,
    bound: HashMap<ParamId, Var>,
}

impl Bindings {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Bindings for pure inference: nothing requires a gradient.
    pub fn frozen() -> Self {
        Self::new(Trainable::none())
    }

    pub fn trainable(&self) -> &Trainable {
        &self.trainable
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let entry = store.entry(id);
        let mut t = entry.tensor.clone();
        t.set_requires_grad(self.trainable.contains(entry.group));
        let v = tape.leaf(t)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    /// Accumulates tape gradients into the trainable buffers of `store`.
    pub fn write_grads(&self, grads: &mut Gradients, store: &mut ParamStore) -> Result<()> {
        let mut pairs: Vec<(ParamId, Var)> = self.bound().collect();
        pairs.sort();
        for (id, v) in pairs {
            if !self.trainable.contains(store.entry(id).group) {
                continue;
            }
            if let Some(g) = grads.take(v) {
                store.get_mut(id).accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}
