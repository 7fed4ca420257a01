//! Sparsity masks realising a kept-parameter budget, and the strategies that
//! produce them.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;

/// Immutable binary mask with the same layout as the store it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    entries: BTreeMap<String, Arc<Vec<bool>>>,
}

impl PruneMask {
    /// All-keep mask for `store`.
    pub fn dense<S: Scalar>(store: &ParamStore<S>) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(n, p)| (n.to_string(), Arc::new(vec![true; p.value().len()])))
                .collect(),
        }
    }

    pub fn from_entries(entries: BTreeMap<String, Vec<bool>>) -> Self {
        Self {
            entries: entries.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.entries.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn kept(&self) -> usize {
        self.entries
            .values()
            .map(|v| v.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    Global,
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub strategy: String,
    /// Kept fraction requested, over prunable entries.
    pub budget: f64,
    /// Kept fraction achieved over prunable entries.
    pub kept_fraction: f64,
    /// Kept fraction over every entry, exempt tensors included.
    pub overall_kept_fraction: f64,
    pub prunable: usize,
    pub exempt: Vec<String>,
    pub per_tensor: BTreeMap<String, f64>,
}

/// Anything that turns `(store, kept fraction)` into a mask.
pub trait PruneStrategy<S: Scalar> {
    fn tag(&self) -> String;
    fn prune(&self, store: &ParamStore<S>, keep: f64) -> Result<(PruneMask, PruneReport)>;
}

/// Keeps the `⌈R·n⌉` largest-magnitude entries, over all prunable tensors
/// jointly or per tensor. Ties resolve toward the lower flat index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnitudePrune {
    pub scope: PruneScope,
    #[serde(default = "yes")]
    pub exempt_biases: bool,
    #[serde(default = "yes")]
    pub exempt_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl Default for MagnitudePrune {
    fn default() -> Self {
        Self {
            scope: PruneScope::Global,
            exempt_biases: true,
            exempt_embeddings: true,
        }
    }
}

impl MagnitudePrune {
    fn exempt(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight => false,
            ParamKind::Bias => self.exempt_biases,
            ParamKind::Embedding => self.exempt_embeddings,
        }
    }
}

fn keep_count(keep: f64, n: usize) -> usize {
    ((keep * n as f64).ceil() as usize).min(n)
}

/// Indices (into `mags`) of the `k` largest magnitudes.
fn top_k(mags: &[(f64, usize)], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| {
        mags[b]
            .0
            .partial_cmp(&mags[a].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

impl<S: Scalar> PruneStrategy<S> for MagnitudePrune {
    fn tag(&self) -> String {
        match self.scope {
            PruneScope::Global => "magnitude-global".into(),
            PruneScope::PerTensor => "magnitude-per-tensor".into(),
        }
    }

    fn prune(&self, store: &ParamStore<S>, keep: f64) -> Result<(PruneMask, PruneReport)> {
        if !(0.0..=1.0).contains(&keep) {
            return Err(invalid(format!("kept fraction {keep} outside [0, 1]")));
        }
        let mut entries: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        let mut exempt = Vec::new();
        let prunable: Vec<(&str, Vec<f64>)> = store
            .iter()
            .filter_map(|(name, p)| {
                if self.exempt(p.kind()) {
                    exempt.push(name.to_string());
                    entries.insert(name.to_string(), vec![true; p.value().len()]);
                    None
                } else {
                    Some((
                        name,
                        p.value().data().iter().map(|v| v.as_f64().abs()).collect(),
                    ))
                }
            })
            .collect();

        match self.scope {
            PruneScope::PerTensor => {
                for (name, mags) in &prunable {
                    let indexed: Vec<(f64, usize)> = mags.iter().copied().zip(0..).collect();
                    let mut mask = vec![false; mags.len()];
                    for i in top_k(&indexed, keep_count(keep, mags.len())) {
                        mask[i] = true;
                    }
                    entries.insert(name.to_string(), mask);
                }
            }
            PruneScope::Global => {
                let mut flat = Vec::new();
                let mut owner = Vec::new();
                for (t, (_, mags)) in prunable.iter().enumerate() {
                    for (i, &m) in mags.iter().enumerate() {
                        flat.push((m, flat.len()));
                        owner.push((t, i));
                    }
                }
                let mut masks: Vec<Vec<bool>> =
                    prunable.iter().map(|(_, m)| vec![false; m.len()]).collect();
                for j in top_k(&flat, keep_count(keep, flat.len())) {
                    let (t, i) = owner[j];
                    masks[t][i] = true;
                }
                for ((name, _), mask) in prunable.iter().zip(masks) {
                    entries.insert(name.to_string(), mask);
                }
            }
        }

        let mask = PruneMask::from_entries(entries);
        let n_prunable: usize = prunable.iter().map(|(_, m)| m.len()).sum();
        let kept_prunable: usize = prunable
            .iter()
            .map(|(n, _)| mask.get(n).unwrap().iter().filter(|&&k| k).count())
            .sum();
        let report = PruneReport {
            strategy: <Self as PruneStrategy<S>>::tag(self),
            budget: keep,
            kept_fraction: if n_prunable == 0 {
                1.0
            } else {
                kept_prunable as f64 / n_prunable as f64
            },
            overall_kept_fraction: mask.kept() as f64 / mask.total().max(1) as f64,
            prunable: n_prunable,
            exempt,
            per_tensor: mask
                .iter()
                .map(|(n, m)| {
                    (
                        n.to_string(),
                        m.iter().filter(|&&k| k).count() as f64 / m.len().max(1) as f64,
                    )
                })
                .collect(),
        };
        Ok((mask, report))
    }
}

pub fn magnitude_prune<S: Scalar>(
    store: &ParamStore<S>,
    keep: f64,
    scope: PruneScope,
) -> Result<(PruneMask, PruneReport)> {
    MagnitudePrune {
        scope,
        ..MagnitudePrune::default()
    }
    .prune(store, keep)
}

/// Zeroes masked entries and attaches the mask so every later update
/// respects it.
pub fn apply_mask<S: Scalar>(store: &mut ParamStore<S>, mask: &PruneMask) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    if names.len() != mask.entries.len() || names.iter().any(|n| !mask.entries.contains_key(n)) {
        return Err(Error::MaskLayout(
            "mask and store name different tensors".into(),
        ));
    }
    for (name, m) in &mask.entries {
        store.attach_mask(name, Arc::clone(m))?;
    }
    Ok(())
}
