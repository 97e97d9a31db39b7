use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Tape, Var};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one tensor inside a [`ParamSet`]. Carries the owning set's id so
/// gradients for several sets can flow through one tape without collisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    set: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Named trainable tensors together with their gradient slots.
#[derive(Debug)]
pub struct ParamSet<T> {
    id: u64,
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
    /// Number of optimizer steps applied.
    pub step: u64,
}

impl<T: Scalar> Clone for ParamSet<T> {
    /// Clones keep the original id so bindings and gradients stay valid for
    /// the copy (used by finite-difference checks).
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
            step: self.step,
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let index = self.entries.len();
        self.by_name.insert(name.clone(), index);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId { set: self.id, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|index| ParamId { set: self.id, index })
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId { set: self.id, index })
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.set == self.id && id.index < self.entries.len()
    }

    fn entry(&self, id: ParamId) -> &Entry<T> {
        assert!(self.owns(id), "parameter {id:?} does not belong to this set");
        &self.entries[id.index]
    }

    fn entry_mut(&mut self, id: ParamId) -> &mut Entry<T> {
        assert!(self.owns(id), "parameter {id:?} does not belong to this set");
        &mut self.entries[id.index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entry(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entry_mut(id).value
    }

    /// Replaces a value, keeping the shape fixed.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = self.entry_mut(id);
        e.value.same_shape(&value, "set_value")?;
        e.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entry(id).grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entry_mut(id).grad
    }

    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>) {
        let e = self.entry_mut(id);
        (&mut e.value, &e.grad)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds every gradient in `grads` that belongs to this set into its slot.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if self.owns(*id) {
                self.entries[id.index].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.norm_sq().as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn insert_or_add(&mut self, id: ParamId, g: Tensor<T>) -> Result<()> {
        match self.map.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(id, g);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Tape variables for the parameters of one or more [`ParamSet`]s. Each
/// parameter is registered once per tape, so every use of it (encode and
/// decode alike) feeds the same gradient slot.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: HashMap<ParamId, Var>,
}

impl Binding {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, sets: &[&ParamSet<T>]) -> Self {
        let mut vars = HashMap::new();
        for set in sets {
            for id in set.ids() {
                vars.insert(id, tape.param(id, set.value(id).clone()));
            }
        }
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        self.vars
            .get(&id)
            .unwrap_or_else(|| panic!("parameter {id:?} is not bound on this tape"))
    }
}
