//! Named parameter stores with gradient accumulators and optional sparsity masks.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter store. Clones get a fresh id, so a tape leaf
/// taken from one store is never mistaken for a leaf of its copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        Self(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Role of a tensor in the network; pruning strategies use it for exemptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Debug)]
pub struct Param<S> {
    value: Tensor<S>,
    grad: Tensor<S>,
    kind: ParamKind,
    mask: Option<Arc<Vec<bool>>>,
}

impl<S: Scalar> Param<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<S> {
        &self.grad
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref().map(Vec::as_slice)
    }

    fn enforce_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &keep) in self.value.data_mut().iter_mut().zip(mask.iter()) {
                if !keep {
                    *v = S::zero();
                }
            }
            for (g, &keep) in self.grad.data_mut().iter_mut().zip(mask.iter()) {
                if !keep {
                    *g = S::zero();
                }
            }
        }
    }
}

impl<S: Scalar> Clone for Param<S> {
    fn clone(&self) -> Self {
        Self {
            value: self.value.clone(),
            grad: self.grad.clone(),
            kind: self.kind,
            mask: self.mask.clone(),
        }
    }
}

/// Ordered map from parameter name to value, gradient accumulator and mask.
///
/// Invariants: every gradient has its value's shape, and masked entries of
/// both value and gradient are exactly `+0.0` after every public mutation.
#[derive(Debug)]
pub struct ParamStore<S> {
    id: StoreId,
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            params: self.params.clone(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            id: StoreId::fresh(),
            params: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, kind: ParamKind) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.into(),
            Param {
                value,
                grad,
                kind,
                mask: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).map(Param::value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).map(Param::grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn nnz(&self) -> usize {
        self.params.values().map(|p| p.value.count_nonzero()).sum()
    }

    /// Overwrites a value (shape must match); masked entries are re-zeroed.
    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        p.enforce_mask();
        Ok(())
    }

    /// Copies every value from `other` (same layout required), keeping this
    /// store's masks and leaving gradients untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::MaskLayout(
                "copy between stores of different layout".into(),
            ));
        }
        for (name, p) in self.params.iter_mut() {
            p.value = other.params[name].value.clone();
            p.enforce_mask();
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamStore<S>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, p)| {
                other
                    .params
                    .get(k)
                    .is_some_and(|q| q.value.shape() == p.value.shape())
            })
    }

    pub fn attach_mask(&mut self, name: &str, mask: Arc<Vec<bool>>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if mask.len() != p.value.len() {
            return Err(Error::MaskLayout(format!(
                "`{name}` has {} entries, mask has {}",
                p.value.len(),
                mask.len()
            )));
        }
        p.mask = Some(mask);
        p.enforce_mask();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Adds `delta` into the named accumulator; masked entries receive nothing.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: p.grad.shape().to_vec(),
                right: delta.shape().to_vec(),
            });
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        p.enforce_mask();
        Ok(())
    }

    pub fn grads_finite(&self) -> bool {
        self.params.values().all(|p| p.grad.is_finite())
    }

    /// Squared L2 norm of the concatenated gradient.
    pub fn grad_norm_sq(&self) -> S {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter())
            .fold(S::zero(), |acc, &g| acc + g * g)
    }

    /// Runs `f(name, values, grads, mask)` for every tensor, then re-imposes
    /// the masks so that no update rule can revive a pruned entry.
    pub fn update_with(&mut self, mut f: impl FnMut(&str, &mut [S], &[S], Option<&[bool]>)) {
        for (name, p) in self.params.iter_mut() {
            let mask = p.mask.clone();
            f(
                name,
                p.value.data_mut(),
                p.grad.data(),
                mask.as_deref().map(Vec::as_slice),
            );
            p.enforce_mask();
        }
    }

    /// Bitwise comparison of all values.
    pub fn values_bitwise_eq(&self, other: &ParamStore<S>) -> bool {
        self.same_layout(other)
            && self.params.iter().all(|(k, p)| {
                let q = &other.params[k];
                p.value
                    .data()
                    .iter()
                    .zip(q.value.data())
                    .all(|(a, b)| a.to_le_f64_bytes() == b.to_le_f64_bytes())
            })
    }

    /// Fresh store with identical values, kinds and masks but zero gradients.
    pub fn detached_copy(&self) -> Self {
        let mut out = self.clone();
        out.zero_grad();
        out
    }

    pub(crate) fn value_data_mut(&mut self, name: &str) -> Result<&mut [S]> {
        self.params
            .get_mut(name)
            .map(|p| p.value.data_mut())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn reenforce_masks(&mut self) {
        for p in self.params.values_mut() {
            p.enforce_mask();
        }
    }
}
