use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which update rule owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// ψ: updated by the task loss.
    Task,
    /// φ: updated by the warp loss only.
    Warp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// All trainable tensors of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter `{name}`");
        self.params.push(Param { name, role, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.params[id.0].role
    }

    /// Same names, roles and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.role == b.role && a.value.shape() == b.value.shape())
    }

    pub fn partition(&self) -> ParamPartition {
        let mut part = ParamPartition::default();
        for p in &self.params {
            match p.role {
                ParamRole::Task => part.task.insert(p.name.clone()),
                ParamRole::Warp => part.warp.insert(p.name.clone()),
            };
        }
        part
    }

    /// SHA-256 over names and exact bit patterns of every parameter whose role
    /// passes `filter`.
    pub fn checksum(&self, filter: impl Fn(ParamRole) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p.role)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for v in p.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn checksum_role(&self, role: ParamRole) -> String {
        self.checksum(|r| r == role)
    }

    pub fn checksum_all(&self) -> String {
        self.checksum(|_| true)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// θ = ψ ∪ φ by name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub task: BTreeSet<String>,
    pub warp: BTreeSet<String>,
}

impl ParamPartition {
    /// Disjoint, and together exactly the names in `params`.
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        if let Some(name) = self.task.intersection(&self.warp).next() {
            return Err(Error::invalid(format!("parameter `{name}` is both task and warp")));
        }
        let all: BTreeSet<String> = params.iter().map(|p| p.name.clone()).collect();
        let covered: BTreeSet<String> = self.task.union(&self.warp).cloned().collect();
        if all != covered {
            return Err(Error::invalid("partition does not cover exactly the model parameters"));
        }
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamSet`].
///
/// Inactive slots are never written: layers skip computing their weight
/// gradients, which is how one role's gradient is zeroed during the other
/// role's backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
    active: Vec<bool>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet, active: impl Fn(ParamRole) -> bool) -> Self {
        Self {
            tensors: params.values().map(|t| Tensor::zeros(t.shape())).collect(),
            active: params.iter().map(|p| active(p.role)).collect(),
        }
    }

    /// No active slots and no buffers; for backward passes that only need
    /// input gradients.
    pub fn inactive(params: &ParamSet) -> Self {
        Self { tensors: vec![Tensor::zeros(&[0]); params.len()], active: vec![false; params.len()] }
    }

    pub fn all(params: &ParamSet) -> Self {
        Self::zeros_like(params, |_| true)
    }

    pub fn for_role(params: &ParamSet, role: ParamRole) -> Self {
        Self::zeros_like(params, |r| r == role)
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|a| *a)
    }

    pub fn is_active(&self, id: ParamId) -> bool {
        self.active[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| *v == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_exact_bits_per_role() {
        let mut p = ParamSet::new();
        let a = p.add("a", ParamRole::Task, Tensor::filled(&[2], 1.0));
        p.add("b", ParamRole::Warp, Tensor::filled(&[2], 2.0));
        let warp_before = p.checksum_role(ParamRole::Warp);
        let task_before = p.checksum_role(ParamRole::Task);
        p.get_mut(a).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_eq!(p.checksum_role(ParamRole::Warp), warp_before);
        assert_ne!(p.checksum_role(ParamRole::Task), task_before);
    }

    #[test]
    fn partition_covers_and_is_disjoint() {
        let mut p = ParamSet::new();
        p.add("a", ParamRole::Task, Tensor::zeros(&[1]));
        p.add("b", ParamRole::Warp, Tensor::zeros(&[1]));
        let part = p.partition();
        part.validate(&p).unwrap();
        let mut bad = part.clone();
        bad.task.insert("b".into());
        assert!(bad.validate(&p).is_err());
        let mut missing = part;
        missing.task.clear();
        assert!(missing.validate(&p).is_err());
    }
}
