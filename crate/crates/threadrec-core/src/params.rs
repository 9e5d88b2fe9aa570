use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The three disjoint parameter sets: agent (thread encoder + similarity MLP),
/// user/item embedding tables, and the sub-sequence modeler encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Agent,
    Embedding,
    Modeler,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Agent => 0,
            ParamGroup::Embedding => 1,
            ParamGroup::Modeler => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ParamGroup::Agent),
            1 => Ok(ParamGroup::Embedding),
            2 => Ok(ParamGroup::Modeler),
            _ => Err(Error::Checkpoint(format!("unknown group tag {tag}"))),
        }
    }
}

/// Handle to one named parameter tensor in a [`ParamBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct ParamEntry<T> {
    name: String,
    group: ParamGroup,
    value: Tensor<T>,
    // Adam state
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Named parameter tensors with per-parameter Adam state.
///
/// The bank is read-only during forward/backward passes; optimizer steps are
/// the only mutation points.
#[derive(Clone)]
pub struct ParamBank<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> ParamBank<T> {
    pub fn new() -> Self {
        ParamBank {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        value.ensure_finite(name)?;
        let id = ParamId(self.entries.len());
        let numel = value.numel();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            step: 0,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn adam_state(&self, id: ParamId) -> (&[T], &[T], u64) {
        let e = &self.entries[id.0];
        (&e.m, &e.v, e.step)
    }

    pub(crate) fn restore_adam_state(
        &mut self,
        id: ParamId,
        m: Vec<T>,
        v: Vec<T>,
        step: u64,
    ) -> Result<()> {
        let e = &mut self.entries[id.0];
        if m.len() != e.value.numel() || v.len() != e.value.numel() {
            return Err(Error::Checkpoint(format!(
                "optimizer state size mismatch for {}",
                e.name
            )));
        }
        e.m = m;
        e.v = v;
        e.step = step;
        Ok(())
    }

    /// Plain copy of one parameter's values.
    pub fn snapshot(&self, id: ParamId) -> Tensor<T> {
        self.entries[id.0].value.clone()
    }

    /// One Adam update over every parameter selected by `filter`.
    ///
    /// beta1=0.9, beta2=0.999, eps=1e-8; `lr` is the only tunable.
    pub fn adam_step<F>(&mut self, grads: &Gradients<T>, lr: f64, filter: F)
    where
        F: Fn(ParamGroup) -> bool,
    {
        let b1 = T::of(ADAM_BETA1);
        let b2 = T::of(ADAM_BETA2);
        let eps = T::of(ADAM_EPS);
        let lr = T::of(lr);
        let one = T::one();
        for (idx, entry) in self.entries.iter_mut().enumerate() {
            if !filter(entry.group) {
                continue;
            }
            let g = &grads.per_param[idx];
            entry.step += 1;
            let bc1 = one - b1.powi(entry.step as i32);
            let bc2 = one - b2.powi(entry.step as i32);
            let data = entry.value.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                entry.m[i] = b1 * entry.m[i] + (one - b1) * gi;
                entry.v[i] = b2 * entry.v[i] + (one - b2) * gi * gi;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

impl<T: Scalar> Default for ParamBank<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Dense gradient buffers aligned with a bank's parameters.
///
/// Parameters unreachable from the backward root keep zero gradients.
#[derive(Debug)]
pub struct Gradients<T> {
    pub(crate) per_param: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(bank: &ParamBank<T>) -> Self {
        Gradients {
            per_param: bank
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.value.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.per_param[id.0]
    }

    pub(crate) fn row_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.per_param[id.0]
    }

    /// Accumulate `other` into `self` (ordered, deterministic reduce).
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        debug_assert_eq!(self.per_param.len(), other.per_param.len());
        for (dst, src) in self.per_param.iter_mut().zip(&other.per_param) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.per_param
            .iter()
            .all(|p| p.iter().all(|x| x.is_finite()))
    }
}
