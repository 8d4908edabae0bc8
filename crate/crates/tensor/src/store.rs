use std::collections::BTreeMap;

use crate::graph::Gradients;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) trainable: bool,
    /// Rows whose gradient is always forced to zero (padding rows).
    pub(crate) frozen_rows: Vec<usize>,
    pub(crate) moment1: Option<Vec<f64>>,
    pub(crate) moment2: Option<Vec<f64>>,
}

/// Named collection of tensors plus their gradient slots and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    pub(crate) step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
            frozen_rows: Vec::new(),
            moment1: None,
            moment2: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Marks `row` as excluded from updates; the row is also zeroed.
    pub fn freeze_row(&mut self, id: ParamId, row: usize) -> Result<()> {
        let p = &mut self.params[id.0];
        let (rows, cols) = p.value.dims2()?;
        if row >= rows {
            return Err(Error::IndexOutOfRange { index: row, len: rows });
        }
        p.value.data_mut()[row * cols..(row + 1) * cols].fill(0.0);
        if !p.frozen_rows.contains(&row) {
            p.frozen_rows.push(row);
        }
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn frozen_rows(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].frozen_rows
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids ordered by name; the order used by checkpoints.
    pub fn ids_by_name(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds gradients into the store's gradient slots. Slots accumulate until
    /// [`ParameterStore::zero_grad`] or an optimizer step clears them.
    pub fn accumulate(&mut self, grads: &Gradients) {
        self.accumulate_scaled(grads, 1.0);
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let slot = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += scale * v;
            }
            if let Ok((_, cols)) = p.value.dims2() {
                for &r in &p.frozen_rows {
                    slot[r * cols..(r + 1) * cols].fill(0.0);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites the value of `dst` with the value of `src` (shapes must match).
    pub fn copy_value(&mut self, src: ParamId, dst: ParamId) -> Result<()> {
        let value = self.params[src.0].value.clone();
        let d = &mut self.params[dst.0];
        if d.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "copy_value",
                left: value.shape().to_vec(),
                right: d.value.shape().to_vec(),
            });
        }
        d.value = value;
        Ok(())
    }

    pub(crate) fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// True when every tensor (values and optimizer moments) is bit-identical,
    /// matching parameters by name.
    pub fn bit_identical(&self, other: &ParameterStore) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.step == other.step
            && self.by_name.len() == other.by_name.len()
            && self.by_name.iter().all(|(name, id)| {
                let Some(oid) = other.by_name.get(name) else {
                    return false;
                };
                let (a, b) = (&self.params[id.0], &other.params[oid.0]);
                a.trainable == b.trainable
                    && a.value.shape() == b.value.shape()
                    && bits(a.value.data()) == bits(b.value.data())
                    && a.moment1.as_deref().map(bits) == b.moment1.as_deref().map(bits)
                    && a.moment2.as_deref().map(bits) == b.moment2.as_deref().map(bits)
            })
    }
}
