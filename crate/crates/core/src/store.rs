//! Named parameter registry with alias groups and freeze control.
//!
//! Every name resolves to a *slot*. Aliased names resolve to the slot of
//! their canonical name, so a write through any alias is visible through
//! all of them and counting slots counts each canonical tensor once.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};
use uniadapter_tensor::{Gradients, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Ownership class of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Pretrained backbone weights (frozen during adaptation).
    Backbone,
    /// Task heads: projections, matching head, temperature, LM head.
    Head,
    /// Adapter / low-rank tensors introduced by an adaptation plan.
    Adapter,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Head => "head",
            Group::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(Group::Backbone),
            "head" => Some(Group::Head),
            "adapter" => Some(Group::Adapter),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Slot<T> {
    /// Canonical name.
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    names: IndexMap<String, usize>,
    slots: Vec<Slot<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: IndexMap::new(),
            slots: Vec::new(),
        }
    }

    /// Registers a canonical tensor (frozen by default).
    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor<T>) -> Result<usize> {
        if self.names.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let slot = self.slots.len();
        self.slots.push(Slot {
            name: name.to_string(),
            group,
            tensor,
            trainable: false,
        });
        self.names.insert(name.to_string(), slot);
        Ok(slot)
    }

    /// Binds `alias` to the storage of `target` (which may itself be an alias).
    pub fn alias(&mut self, alias: &str, target: &str) -> Result<()> {
        if self.names.contains_key(alias) {
            return Err(Error::DuplicateParameter(alias.to_string()));
        }
        let slot = self.slot_of(target)?;
        self.names.insert(alias.to_string(), slot);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains_key(name)
    }

    pub fn slot_of(&self, name: &str) -> Result<usize> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.slots[self.slot_of(name)?].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let s = self.slot_of(name)?;
        Ok(&mut self.slots[s].tensor)
    }

    /// Canonical name behind `name`.
    pub fn canonical(&self, name: &str) -> Result<&str> {
        Ok(&self.slots[self.slot_of(name)?].name)
    }

    pub fn is_alias(&self, name: &str) -> bool {
        self.names
            .get(name)
            .is_some_and(|&s| self.slots[s].name != name)
    }

    pub fn slot(&self, slot: usize) -> &Slot<T> {
        &self.slots[slot]
    }

    pub fn slot_mut(&mut self, slot: usize) -> &mut Slot<T> {
        &mut self.slots[slot]
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// All names (canonical and alias) in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// `(alias, canonical)` pairs in registration order.
    pub fn aliases(&self) -> Vec<(&str, &str)> {
        self.names
            .iter()
            .filter(|(n, &s)| self.slots[s].name != **n)
            .map(|(n, &s)| (n.as_str(), self.slots[s].name.as_str()))
            .collect()
    }

    /// Every name that resolves to `slot`, canonical first.
    pub fn names_of(&self, slot: usize) -> Vec<&str> {
        let mut out = vec![self.slots[slot].name.as_str()];
        out.extend(
            self.names
                .iter()
                .filter(|(n, &s)| s == slot && **n != self.slots[slot].name)
                .map(|(n, _)| n.as_str()),
        );
        out
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        let s = self.slot_of(name)?;
        self.slots[s].trainable = on;
        Ok(())
    }

    /// Sets the trainable flag of every slot in `group`.
    pub fn set_group_trainable(&mut self, group: Group, on: bool) {
        for s in self.slots.iter_mut().filter(|s| s.group == group) {
            s.trainable = on;
        }
    }

    pub fn freeze_all(&mut self) {
        for s in &mut self.slots {
            s.trainable = false;
        }
    }

    pub fn trainable_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots.len()).filter(|&i| self.slots[i].trainable)
    }

    /// Scalar count of trainable canonical tensors.
    pub fn count_trainable(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.tensor.numel())
            .sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.slots
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.tensor.numel())
            .sum()
    }

    /// SHA-256 over name, shape and little-endian `f32` bytes of every
    /// canonical tensor in `group`, in slot order.
    pub fn digest(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        for s in self.slots.iter().filter(|s| s.group == group) {
            h.update((s.name.len() as u32).to_le_bytes());
            h.update(s.name.as_bytes());
            for &e in s.tensor.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in s.tensor.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Same store with every tensor converted to another precision.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    group: s.group,
                    tensor: s.tensor.cast(),
                    trainable: s.trainable,
                })
                .collect(),
        }
    }

    /// Copies values of every canonical tensor whose name exists in `other`
    /// with a matching shape. Returns how many tensors were copied.
    pub fn copy_matching(&mut self, other: &ParameterStore<T>, group: Group) -> Result<usize> {
        let mut n = 0;
        for slot in self.slots.iter_mut().filter(|s| s.group == group) {
            let src = other.get(&slot.name)?;
            if src.shape() != slot.tensor.shape() {
                return Err(Error::Contract(format!(
                    "shape of `{}` differs: {:?} vs {:?}",
                    slot.name,
                    src.shape(),
                    slot.tensor.shape()
                )));
            }
            slot.tensor.data_mut().copy_from_slice(src.data());
            n += 1;
        }
        Ok(n)
    }
}

/// A forward pass in progress: a tape plus lazily bound parameters.
///
/// Each slot is placed on the tape at most once, as a variable if it is
/// trainable and as a constant otherwise, so every use of an aliased tensor
/// accumulates into the same gradient.
pub struct Graph<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParameterStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.num_slots()],
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn param_slot(&mut self, slot: usize) -> Var {
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let s = self.store.slot(slot);
        let v = if s.trainable {
            self.tape.variable(s.tensor.clone())
        } else {
            self.tape.constant(s.tensor.clone())
        };
        self.bound[slot] = Some(v);
        v
    }

    /// The variable a slot was bound to, if this graph used it.
    pub fn bound(&self, slot: usize) -> Option<Var> {
        self.bound[slot]
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let slot = self.store.slot_of(name)?;
        Ok(self.param_slot(slot))
    }

    /// Per-slot gradients of trainable slots touched by this graph.
    pub fn slot_grads(&self, grads: &Gradients<T>) -> Vec<(usize, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(slot, v)| {
                let v = (*v)?;
                if !self.store.slot(slot).trainable {
                    return None;
                }
                grads.get(v).map(|g| (slot, g.to_vec()))
            })
            .collect()
    }
}
