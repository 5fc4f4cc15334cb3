//! Named parameter registry shared by every trainable model.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]. Before a forward pass the store
//! is bound to a [`Graph`], producing a [`Bound`] table that maps each id to its
//! graph variable.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Ordered list of named tensors. Order is part of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(NamedParam { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id_of(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.entries.iter_mut()
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .by_name_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?}, not {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every same-named, same-shaped parameter from `other`. Returns how
    /// many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for entry in &mut self.entries {
            if let Some(src) = other.by_name(&entry.name) {
                if src.shape() == entry.value.shape() {
                    entry.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| g.param(e.value.clone()))
                .collect(),
        )
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| g.constant(e.value.clone()))
                .collect(),
        )
    }
}

/// Graph variables for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Adopts graph variables listed in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Collects each parameter's gradient after `backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.0
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Allocates and initializes parameters while a model layout is being built.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// Uniform in `(−1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::new(shape.to_vec(), values).expect("shape from layout");
        self.store.push(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.store.push(name, Tensor::full(shape, value))
    }

    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.store.push(name, value)
    }
}
