//! Ground-truth Gaussian mixtures and labeled sample sets drawn from them.
//!
//! Concept `i + 1` owns component `i`; concept 0 is the null concept and has
//! no component of its own.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::denoiser::NULL_CONCEPT;
use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, symmetric PSD.
    pub cov: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// `k` isotropic components with covariance `variance·I`, equally spaced
    /// on a circle of `radius`, equal weights.
    pub fn circle(k: usize, radius: f64, variance: f64) -> Self {
        let components = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                Component {
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    cov: vec![variance, 0.0, 0.0, variance],
                }
            })
            .collect();
        Self {
            components,
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Number of conditioning ids, the null concept included.
    pub fn concept_count(&self) -> usize {
        self.components.len() + 1
    }

    pub fn component(&self, concept: usize) -> Result<&Component> {
        if concept == NULL_CONCEPT {
            return Err(invalid("the null concept has no mixture component"));
        }
        self.components
            .get(concept - 1)
            .ok_or(Error::UnknownConcept {
                id: concept,
                count: self.concept_count(),
            })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.components.is_empty() || d == 0 {
            return Err(invalid(
                "mixture needs at least one component of positive dimension",
            ));
        }
        if self.weights.len() != self.components.len() {
            return Err(invalid("one weight per component required"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(invalid("mixture weights must be non-negative and sum to 1"));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.cov.len() != d * d {
                return Err(invalid(format!(
                    "component {i} has inconsistent dimensions"
                )));
            }
            let m = DMatrix::from_row_slice(d, d, &c.cov);
            if (&m - m.transpose()).abs().max() > 1e-12 {
                return Err(invalid(format!(
                    "component {i} covariance is not symmetric"
                )));
            }
            let min_eig = m.symmetric_eigenvalues().min();
            if min_eig < -1e-12 {
                return Err(invalid(format!(
                    "component {i} covariance is not PSD (eigenvalue {min_eig})"
                )));
            }
        }
        Ok(())
    }

    /// Per-coordinate standard deviation of the mixture, averaged over
    /// coordinates: `sqrt(tr(Cov[x]) / d)`.
    pub fn data_std(&self) -> f64 {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (c, w) in self.components.iter().zip(&self.weights) {
            for j in 0..d {
                mean[j] += w * c.mean[j];
            }
        }
        let mut tr = 0.0;
        for (c, w) in self.components.iter().zip(&self.weights) {
            for j in 0..d {
                tr += w * (c.cov[j * d + j] + (c.mean[j] - mean[j]).powi(2));
            }
        }
        (tr / d as f64).sqrt()
    }

    /// Deterministic SHA-256 over the JSON-free canonical encoding.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in &self.components {
            for v in c.mean.iter().chain(&c.cov) {
                h.update(v.to_le_bytes());
            }
        }
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// `n` draws from the component owned by `concept`.
    pub fn sample_concept<S: Scalar>(
        &self,
        concept: usize,
        n: usize,
        rng: &mut RngStream,
    ) -> Result<Tensor<S>> {
        let comp = self.component(concept)?;
        let d = self.dim();
        let l = psd_factor(&comp.cov, d);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.normal::<f64>()));
            let x = &l * z;
            out.extend((0..d).map(|j| S::lit(comp.mean[j] + x[j])));
        }
        Tensor::new(vec![n, d], out)
    }

    /// `n` draws from the whole mixture, labeled with their concept.
    pub fn sample_marginal<S: Scalar>(
        &self,
        n: usize,
        rng: &mut RngStream,
    ) -> Result<LabeledSet<S>> {
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let x = self.sample_concept::<S>(pick + 1, 1, rng)?;
            rows.push(x.into_data());
            labels.push(pick + 1);
        }
        Ok(LabeledSet {
            x: Tensor::from_rows(&rows)?,
            c: labels,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `L` with `L Lᵀ = cov`. Falls back to the symmetric square root when the
/// Cholesky factorization fails (singular covariance).
fn psd_factor(cov: &[f64], d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(d, d, cov);
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = m.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Rows of data with one concept id each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet<S> {
    pub x: Tensor<S>,
    pub c: Vec<usize>,
}

impl<S: Scalar> LabeledSet<S> {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn scaled(&self, k: S) -> Self {
        Self {
            x: self.x.map(|v| v * k),
            c: self.c.clone(),
        }
    }

    /// Rows whose concept satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.c[i])).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let w = self.x.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            x: Tensor::new(vec![idx.len(), w], data).expect("row count matches"),
            c: idx.iter().map(|&i| self.c[i]).collect(),
        }
    }

    /// `n` rows drawn uniformly with replacement; each label is replaced by
    /// the null concept with probability `null_prob`.
    pub fn minibatch(&self, n: usize, null_prob: f64, rng: &mut RngStream) -> Result<Self> {
        if self.is_empty() {
            return Err(invalid("cannot draw a minibatch from an empty set"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.index(self.len())).collect();
        let mut out = self.select(&idx);
        if null_prob > 0.0 {
            for c in &mut out.c {
                if rng.uniform() < null_prob {
                    *c = NULL_CONCEPT;
                }
            }
        }
        Ok(out)
    }
}

/// `n_per_concept` draws from every component, concept-major order.
pub fn gen_dataset<S: Scalar>(
    spec: &MixtureSpec,
    n_per_concept: usize,
    rng: &mut RngStream,
) -> Result<LabeledSet<S>> {
    spec.validate()?;
    if n_per_concept == 0 {
        return Err(invalid("need at least one sample per concept"));
    }
    let mut parts = Vec::new();
    let mut c = Vec::new();
    for concept in 1..spec.concept_count() {
        parts.push(spec.sample_concept::<S>(concept, n_per_concept, rng)?);
        c.extend(std::iter::repeat_n(concept, n_per_concept));
    }
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Ok(LabeledSet {
        x: Tensor::concat_rows(&refs)?,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_layout() {
        let s = MixtureSpec::circle(8, 5.0, 0.15);
        s.validate().unwrap();
        assert_eq!(s.concept_count(), 9);
        assert!((s.component(3).unwrap().mean[1] - 5.0).abs() < 1e-12);
        // r²/2 + s per coordinate
        assert!((s.data_std() - (12.5f64 + 0.15).sqrt()).abs() < 1e-12);
        assert!(s.component(0).is_err());
        assert!(s.component(9).is_err());
    }

    #[test]
    fn zero_covariance_gives_the_mean() {
        let s = MixtureSpec {
            components: vec![Component {
                mean: vec![1.5, -2.0],
                cov: vec![0.0; 4],
            }],
            weights: vec![1.0],
        };
        let d = gen_dataset::<f64>(&s, 5, &mut RngStream::root(1)).unwrap();
        for i in 0..5 {
            assert_eq!(d.x.row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = MixtureSpec::circle(2, 1.0, 0.1);
        s.weights = vec![0.7, 0.7];
        assert!(s.validate().is_err());
        let mut s = MixtureSpec::circle(2, 1.0, 0.1);
        s.components[0].cov = vec![1.0, 2.0, 2.0, 1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn minibatch_null_drop() {
        let d = gen_dataset::<f64>(
            &MixtureSpec::circle(4, 1.0, 0.1),
            10,
            &mut RngStream::root(1),
        )
        .unwrap();
        let all_null = d.minibatch(20, 1.0, &mut RngStream::root(2)).unwrap();
        assert!(all_null.c.iter().all(|&c| c == NULL_CONCEPT));
        let none = d.minibatch(20, 0.0, &mut RngStream::root(2)).unwrap();
        assert!(none.c.iter().all(|&c| c != NULL_CONCEPT));
        assert_eq!(d.filter(|c| c != 2).len(), 30);
    }
}
