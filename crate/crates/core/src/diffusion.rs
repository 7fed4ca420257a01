//! Forward noising, the weighted denoising objective and ancestral sampling.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, NULL_CONCEPT};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VariancePreserving,
    Edm,
}

/// Per-timestep `(α_t, σ_t, w_t)` tables, indexed `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    kind: ScheduleKind,
    alpha: Vec<S>,
    sigma: Vec<S>,
    weight: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Variance-preserving schedule with `β` linear from `beta_start` to
    /// `beta_end` over `1..=steps`: `α_t = √ᾱ_t`, `σ_t = √(1 − ᾱ_t)`.
    pub fn vp_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let mut alpha = vec![S::one()];
        let mut sigma = vec![S::zero()];
        let mut abar = 1.0f64;
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            abar *= 1.0 - beta;
            alpha.push(S::lit(abar.sqrt()));
            sigma.push(S::lit((1.0 - abar).sqrt()));
        }
        Ok(Self {
            kind: ScheduleKind::VariancePreserving,
            weight: vec![S::one(); steps + 1],
            alpha,
            sigma,
        })
    }

    /// `α_t = 1`, `σ_t = sigma_step · t`.
    pub fn edm(steps: usize, sigma_step: f64) -> Result<Self> {
        if steps == 0 || sigma_step <= 0.0 {
            return Err(invalid(
                "edm schedule needs steps >= 1 and a positive sigma step",
            ));
        }
        Ok(Self {
            kind: ScheduleKind::Edm,
            alpha: vec![S::one(); steps + 1],
            sigma: (0..=steps).map(|t| S::lit(sigma_step * t as f64)).collect(),
            weight: vec![S::one(); steps + 1],
        })
    }

    /// Replaces the loss weights `w_0..=w_T`.
    pub fn with_weights(mut self, weight: Vec<S>) -> Result<Self> {
        if weight.len() != self.alpha.len() {
            return Err(invalid(format!(
                "expected {} weights, got {}",
                self.alpha.len(),
                weight.len()
            )));
        }
        if weight.iter().any(|w| !w.is_finite() || *w < S::zero()) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`, the largest valid timestep.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> S {
        self.sigma[t]
    }

    pub fn weight(&self, t: usize) -> S {
        self.weight[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// Serializable description of a schedule, as it appears in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_sigma_step")]
    pub sigma_step: f64,
    /// Optional `w_0..=w_T`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn default_beta_start() -> f64 {
    1e-3
}
fn default_beta_end() -> f64 {
    0.2
}
fn default_sigma_step() -> f64 {
    0.05
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VariancePreserving,
            steps: 100,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            sigma_step: default_sigma_step(),
            weights: None,
        }
    }
}

impl ScheduleSpec {
    pub fn build<S: Scalar>(&self) -> Result<NoiseSchedule<S>> {
        let sched = match self.kind {
            ScheduleKind::VariancePreserving => {
                NoiseSchedule::vp_linear(self.steps, self.beta_start, self.beta_end)?
            }
            ScheduleKind::Edm => NoiseSchedule::edm(self.steps, self.sigma_step)?,
        };
        match &self.weights {
            Some(w) => sched.with_weights(w.iter().map(|&x| S::lit(x)).collect()),
            None => Ok(sched),
        }
    }
}

/// One minibatch of the denoising objective.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch<S> {
    pub x0: Tensor<S>,
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
    pub c: Vec<usize>,
}

impl<S: Scalar> DiffusionBatch<S> {
    /// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` for the given clean rows.
    pub fn sample(
        x0: Tensor<S>,
        c: Vec<usize>,
        sched: &NoiseSchedule<S>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let b = x0.rows();
        if c.len() != b || x0.rank() != 2 {
            return Err(invalid(format!(
                "{} concept ids for x0 of shape {:?}",
                c.len(),
                x0.shape()
            )));
        }
        let t = (0..b)
            .map(|_| rng.int_inclusive(1, sched.steps()))
            .collect();
        let eps = rng.normal_tensor(x0.shape());
        Ok(Self { x0, t, eps, c })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Same clean data, noise and timesteps under different conditioning.
    pub fn with_concepts(&self, c: Vec<usize>) -> Self {
        Self { c, ..self.clone() }
    }

    pub fn concat(parts: &[&DiffusionBatch<S>]) -> Result<Self> {
        let x0s: Vec<&Tensor<S>> = parts.iter().map(|p| &p.x0).collect();
        let epss: Vec<&Tensor<S>> = parts.iter().map(|p| &p.eps).collect();
        Ok(Self {
            x0: Tensor::concat_rows(&x0s)?,
            eps: Tensor::concat_rows(&epss)?,
            t: parts.iter().flat_map(|p| p.t.iter().copied()).collect(),
            c: parts.iter().flat_map(|p| p.c.iter().copied()).collect(),
        })
    }

    fn validate(&self, sched: &NoiseSchedule<S>) -> Result<()> {
        if self.x0.shape() != self.eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "diffusion batch",
                left: self.x0.shape().to_vec(),
                right: self.eps.shape().to_vec(),
            });
        }
        if self.t.len() != self.x0.rows() || self.c.len() != self.x0.rows() {
            return Err(invalid("batch columns have different lengths"));
        }
        self.t.iter().try_for_each(|&t| sched.check_timestep(t))
    }
}

/// `x_t = α_t x₀ + σ_t ε`, row by row.
pub fn forward_noise<S: Scalar>(
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    batch.validate(sched)?;
    let w = batch.x0.row_len();
    let mut out = Vec::with_capacity(batch.x0.len());
    for (i, &t) in batch.t.iter().enumerate() {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for j in 0..w {
            out.push(a * batch.x0.data()[i * w + j] + s * batch.eps.data()[i * w + j]);
        }
    }
    Tensor::new(batch.x0.shape().to_vec(), out)
}

/// `mean_i w_i ‖pred_i − target_i‖²` over the rows of two `[B, d]` nodes.
pub fn weighted_row_sq_error<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: Var,
    weights: Option<&[S]>,
) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum_last(sq)?;
    let per_row = match weights {
        Some(w) => {
            let wv = tape.constant(Tensor::vector(w.to_vec()))?;
            tape.mul(per_row, wv)?
        }
        None => per_row,
    };
    tape.mean(per_row)
}

/// The loss given a prediction already on the tape.
pub fn denoising_loss_from<S: Scalar>(
    tape: &mut Tape<S>,
    eps_pred: Var,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    let target = tape.constant(batch.eps.clone())?;
    let w: Vec<S> = batch.t.iter().map(|&t| sched.weight(t)).collect();
    weighted_row_sq_error(tape, eps_pred, target, Some(&w))
}

/// `mean_i w_{t_i} ‖ε_θ(x_t, t, c) − ε‖²` recorded on `tape`.
pub fn diffusion_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    let x_t = forward_noise(batch, sched)?;
    let pred = model.predict(tape, store, &x_t, &batch.t, &batch.c)?;
    denoising_loss_from(tape, pred.eps, batch, sched)
}

/// Classifier-free mixed prediction `ε_c + g (ε_c − ε_∅)`; `g = 0` is the
/// plain conditional prediction and skips the unconditional pass.
fn guided_eps<S: Scalar>(
    model: &Denoiser<S>,
    store: &ParamStore<S>,
    x: &Tensor<S>,
    t: usize,
    concept: usize,
    guidance: S,
) -> Result<Tensor<S>> {
    let n = x.rows();
    let ts = vec![t; n];
    let cond = model.predict_values(store, x, &ts, &vec![concept; n])?.eps;
    if guidance == S::zero() {
        return Ok(cond);
    }
    let uncond = model
        .predict_values(store, x, &ts, &vec![NULL_CONCEPT; n])?
        .eps;
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| c + guidance * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Ancestral sampling: start from `σ_T z` and step through the Gaussian
/// posterior `q(x_{t−1} | x_t, x̂₀)` with `x̂₀` from the predicted noise.
pub fn ancestral_sample<S: Scalar>(
    model: &Denoiser<S>,
    store: &ParamStore<S>,
    concept: usize,
    n: usize,
    sched: &NoiseSchedule<S>,
    guidance: S,
    rng: &mut RngStream,
) -> Result<Tensor<S>> {
    if guidance < S::zero() {
        return Err(invalid("guidance scale must be non-negative"));
    }
    let d = model.config().input_dim;
    let big_t = sched.steps();
    let mut x = rng
        .normal_tensor::<S>(&[n, d])
        .map(|z| z * sched.sigma(big_t));
    for t in (1..=big_t).rev() {
        let eps = guided_eps(model, store, &x, t, concept, guidance)?;
        let s = t - 1;
        let (a_t, sig_t, a_s, sig_s) = (
            sched.alpha(t),
            sched.sigma(t),
            sched.alpha(s),
            sched.sigma(s),
        );
        let a_ts = a_t / a_s;
        let var_ts = sig_t * sig_t - a_ts * a_ts * sig_s * sig_s;
        let c_x = a_ts * sig_s * sig_s / (sig_t * sig_t);
        let c_x0 = a_s * var_ts / (sig_t * sig_t);
        let std = (var_ts * sig_s * sig_s / (sig_t * sig_t))
            .max(S::zero())
            .sqrt();
        let noise = rng.normal_tensor::<S>(&[n, d]);
        let data: Vec<S> = x
            .data()
            .iter()
            .zip(eps.data())
            .zip(noise.data())
            .map(|((&xt, &e), &z)| {
                let x0_hat = (xt - sig_t * e) / a_t;
                c_x * xt + c_x0 * x0_hat + std * z
            })
            .collect();
        x = Tensor::new(vec![n, d], data)?;
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { timestep: t });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn vp_tables_preserve_variance_and_grow() {
        let s = NoiseSchedule::<f64>::vp_linear(100, 1e-3, 0.2).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.sigma(0), 0.0);
        for t in 0..=100 {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(s.sigma(t) >= s.sigma(t - 1));
            }
        }
        // terminal state is essentially pure noise
        assert!(s.alpha(100) < 0.01);
    }

    #[test]
    fn edm_tables() {
        let s = NoiseSchedule::<f64>::edm(10, 1.0).unwrap();
        for t in 0..=10 {
            assert_eq!(s.alpha(t), 1.0);
            assert_eq!(s.sigma(t), t as f64);
        }
    }

    #[test]
    fn zero_noise_scales_x0() {
        let s = NoiseSchedule::<f64>::vp_linear(10, 0.01, 0.2).unwrap();
        let b = DiffusionBatch {
            x0: Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap(),
            t: vec![3, 10],
            eps: Tensor::zeros(&[2, 2]),
            c: vec![1, 1],
        };
        let xt = forward_noise(&b, &s).unwrap();
        assert_eq!(
            xt.data(),
            &[
                s.alpha(3),
                -2.0 * s.alpha(3),
                3.0 * s.alpha(10),
                0.5 * s.alpha(10)
            ]
        );
    }

    #[test]
    fn edm_noising_adds_t_eps() {
        let s = NoiseSchedule::<f64>::edm(5, 1.0).unwrap();
        let b = DiffusionBatch {
            x0: Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            t: vec![4],
            eps: Tensor::from_rows(&[vec![0.5, -0.25]]).unwrap(),
            c: vec![1],
        };
        assert_eq!(forward_noise(&b, &s).unwrap().data(), &[3.0, 1.0]);
    }

    #[test]
    fn timestep_range_enforced() {
        let s = NoiseSchedule::<f64>::vp_linear(10, 0.01, 0.2).unwrap();
        let mut b = DiffusionBatch {
            x0: Tensor::zeros(&[1, 2]),
            t: vec![0],
            eps: Tensor::zeros(&[1, 2]),
            c: vec![1],
        };
        assert_eq!(
            forward_noise(&b, &s).unwrap_err(),
            Error::TimestepOutOfRange { t: 0, max: 10 }
        );
        b.t = vec![11];
        assert!(forward_noise(&b, &s).is_err());
    }

    #[test]
    fn hand_computed_loss() {
        let mut tape = Tape::<f64>::new();
        let pred = tape
            .constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())
            .unwrap();
        let b = DiffusionBatch {
            x0: Tensor::zeros(&[1, 2]),
            t: vec![1],
            eps: Tensor::from_rows(&[vec![-1.0, 0.5]]).unwrap(),
            c: vec![1],
        };
        let s = NoiseSchedule::<f64>::vp_linear(4, 0.01, 0.2).unwrap();
        let l = denoising_loss_from(&mut tape, pred, &b, &s).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 4.0 + 2.25);
        // a prediction equal to the noise has zero loss
        let exact = tape.constant(b.eps.clone()).unwrap();
        let l0 = denoising_loss_from(&mut tape, exact, &b, &s).unwrap();
        assert_eq!(tape.scalar_value(l0).unwrap(), 0.0);
    }

    #[test]
    fn weights_scale_rows() {
        let s = NoiseSchedule::<f64>::vp_linear(2, 0.01, 0.2)
            .unwrap()
            .with_weights(vec![0.0, 2.0, 0.5])
            .unwrap();
        let b = DiffusionBatch {
            x0: Tensor::zeros(&[2, 1]),
            t: vec![1, 2],
            eps: Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            c: vec![1, 1],
        };
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(Tensor::zeros(&[2, 1])).unwrap();
        let l = denoising_loss_from(&mut tape, zero, &b, &s).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), (2.0 * 1.0 + 0.5 * 4.0) / 2.0);
        assert!(NoiseSchedule::<f64>::vp_linear(2, 0.01, 0.2)
            .unwrap()
            .with_weights(vec![1.0])
            .is_err());
    }

    fn tiny_model() -> (Denoiser<f64>, ParamStore<f64>) {
        let cfg = DenoiserConfig {
            input_dim: 2,
            hidden: vec![6, 6],
            time_embed_dim: 4,
            concept_count: 3,
            concept_embed_dim: 2,
            feature_taps: vec![1],
            time_max_period: 1000.0,
        };
        let m = Denoiser::new(cfg).unwrap();
        let s = m.init(&mut RngStream::root(11));
        (m, s)
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let (m, s) = tiny_model();
        let sched = NoiseSchedule::vp_linear(20, 1e-2, 0.3).unwrap();
        let a = ancestral_sample(
            &m,
            &s,
            1,
            16,
            &sched,
            0.0,
            &mut RngStream::root(2).derive("x"),
        )
        .unwrap();
        let b = ancestral_sample(
            &m,
            &s,
            1,
            16,
            &sched,
            0.0,
            &mut RngStream::root(2).derive("x"),
        )
        .unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn guidance_degenerates_when_conditioning_is_inert() {
        let (m, mut s) = tiny_model();
        // identical embedding rows: conditional == unconditional
        let table = s.value("concept_embed").unwrap().clone();
        let w = table.shape()[1];
        let row0 = table.data()[..w].to_vec();
        let mut same = table.clone();
        for r in 0..3 {
            same.data_mut()[r * w..(r + 1) * w].copy_from_slice(&row0);
        }
        s.set_value("concept_embed", same).unwrap();
        let sched = NoiseSchedule::vp_linear(20, 1e-2, 0.3).unwrap();
        let plain = ancestral_sample(&m, &s, 1, 8, &sched, 0.0, &mut RngStream::root(3)).unwrap();
        let guided = ancestral_sample(&m, &s, 1, 8, &sched, 3.0, &mut RngStream::root(3)).unwrap();
        assert_eq!(plain, guided);
    }

    #[test]
    fn diverging_sampler_reports_timestep() {
        let (m, mut s) = tiny_model();
        s.set_value("out.bias", Tensor::vector(vec![f64::MAX, f64::MAX]))
            .unwrap();
        let sched = NoiseSchedule::vp_linear(20, 1e-2, 0.3).unwrap();
        let err = ancestral_sample(&m, &s, 1, 4, &sched, 0.0, &mut RngStream::root(3)).unwrap_err();
        assert!(
            matches!(
                err,
                Error::SamplerDiverged { timestep: 20 } | Error::NonFinite { .. }
            ),
            "{err:?}"
        );
    }
}
