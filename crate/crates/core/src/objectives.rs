//! Training objectives: distillation (output and feature), the combined
//! fine-tuning loss, and the two concept-unlearning losses.
//!
//! The teacher is always evaluated off-tape. Its outputs enter the student's
//! tape as constants, so no gradient can reach teacher parameters.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, FeatureTrace, Prediction, NULL_CONCEPT};
use crate::diffusion::{
    denoising_loss_from, forward_noise, weighted_row_sq_error, DiffusionBatch, NoiseSchedule,
};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of the fine-tuning loss `w_diff·L_diff + w_outkd·L_outkd + w_featkd·L_featkd`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtWeights {
    pub w_diff: f64,
    pub w_outkd: f64,
    pub w_featkd: f64,
}

impl Default for FtWeights {
    fn default() -> Self {
        Self {
            w_diff: 1.0,
            w_outkd: 2.0,
            w_featkd: 0.1,
        }
    }
}

impl FtWeights {
    /// Plain denoising, no distillation.
    pub fn without_distill() -> Self {
        Self {
            w_diff: 1.0,
            w_outkd: 0.0,
            w_featkd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_diff, self.w_outkd, self.w_featkd];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid(format!(
                "fine-tune weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.w_outkd != 0.0 || self.w_featkd != 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnlearnMode {
    AnchorAblation,
    NegativeGuidance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSpec {
    pub mode: UnlearnMode,
    pub target: usize,
    /// Replacement concept for anchor ablation; the null concept is allowed.
    #[serde(default)]
    pub anchor: usize,
    /// Negative-guidance strength `η_g`.
    #[serde(default = "default_eta")]
    pub guidance_eta: f64,
}

fn default_eta() -> f64 {
    1.0
}

impl Default for UnlearnSpec {
    /// Negative guidance away from concept 1.
    fn default() -> Self {
        Self::negative_guidance(1)
    }
}

impl UnlearnSpec {
    pub fn negative_guidance(target: usize) -> Self {
        Self {
            mode: UnlearnMode::NegativeGuidance,
            target,
            anchor: NULL_CONCEPT,
            guidance_eta: default_eta(),
        }
    }

    pub fn anchor_ablation(target: usize, anchor: usize) -> Self {
        Self {
            mode: UnlearnMode::AnchorAblation,
            target,
            anchor,
            guidance_eta: default_eta(),
        }
    }

    pub fn validate(&self, concept_count: usize) -> Result<()> {
        if self.target == NULL_CONCEPT || self.target >= concept_count {
            return Err(Error::UnknownConcept {
                id: self.target,
                count: concept_count,
            });
        }
        if self.anchor >= concept_count {
            return Err(Error::UnknownConcept {
                id: self.anchor,
                count: concept_count,
            });
        }
        if self.mode == UnlearnMode::AnchorAblation && self.anchor == self.target {
            return Err(invalid(
                "anchor concept must differ from the target concept",
            ));
        }
        if !self.guidance_eta.is_finite() || self.guidance_eta < 0.0 {
            return Err(invalid("guidance strength must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A model whose parameters are read but never trained.
#[derive(Clone, Copy)]
pub struct Frozen<'a, S> {
    pub model: &'a Denoiser<S>,
    pub store: &'a ParamStore<S>,
}

impl<'a, S: Scalar> Frozen<'a, S> {
    pub fn new(model: &'a Denoiser<S>, store: &'a ParamStore<S>) -> Self {
        Self { model, store }
    }

    pub fn predict(
        &self,
        x_t: &Tensor<S>,
        t: &[usize],
        c: &[usize],
    ) -> Result<Prediction<Tensor<S>>> {
        self.model.predict_values(self.store, x_t, t, c)
    }
}

/// `mean_b ‖ε_T − ε_S‖²`
pub fn out_kd_from<S: Scalar>(
    tape: &mut Tape<S>,
    student_eps: Var,
    teacher_eps: &Tensor<S>,
) -> Result<Var> {
    let t = tape.constant(teacher_eps.clone())?;
    weighted_row_sq_error(tape, student_eps, t, None)
}

/// `Σ_i mean_b ‖f^i_T − f^i_S‖²` over matching taps.
pub fn feat_kd_from<S: Scalar>(
    tape: &mut Tape<S>,
    student: &FeatureTrace<Var>,
    teacher: &FeatureTrace<Tensor<S>>,
) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::TapMismatch {
            index: student.len().min(teacher.len()),
            reason: format!(
                "student has {} taps, teacher {}",
                student.len(),
                teacher.len()
            ),
        });
    }
    let mut total: Option<Var> = None;
    for (&(si, sv), (ti, tv)) in student.taps.iter().zip(&teacher.taps) {
        if si != *ti || tape.value(sv).shape() != tv.shape() {
            return Err(Error::TapMismatch {
                index: si,
                reason: format!(
                    "student tap {si} {:?} vs teacher tap {ti} {:?}",
                    tape.value(sv).shape(),
                    tv.shape()
                ),
            });
        }
        let t = tape.constant(tv.clone())?;
        let term = weighted_row_sq_error(tape, sv, t, None)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(Tensor::scalar(S::zero())),
    }
}

/// Individual terms of the fine-tuning loss plus their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct FtTerms {
    pub total: Var,
    pub diff: Var,
    pub out_kd: Option<Var>,
    pub feat_kd: Option<Var>,
}

/// Fine-tuning loss from a student prediction already on the tape and the
/// teacher's outputs on the same inputs (only needed when distilling).
pub fn ft_loss_from<S: Scalar>(
    tape: &mut Tape<S>,
    student: &Prediction<Var>,
    teacher: Option<&Prediction<Tensor<S>>>,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
    w: &FtWeights,
) -> Result<FtTerms> {
    w.validate()?;
    let diff = denoising_loss_from(tape, student.eps, batch, sched)?;
    let mut total = tape.scale(diff, S::lit(w.w_diff))?;
    let (mut out_kd, mut feat_kd) = (None, None);
    if w.needs_teacher() {
        let teacher =
            teacher.ok_or_else(|| invalid("distillation weights set but no teacher outputs"))?;
        let o = out_kd_from(tape, student.eps, &teacher.eps)?;
        let f = feat_kd_from(tape, &student.trace, &teacher.trace)?;
        let ow = tape.scale(o, S::lit(w.w_outkd))?;
        let fw = tape.scale(f, S::lit(w.w_featkd))?;
        total = tape.add(total, ow)?;
        total = tape.add(total, fw)?;
        out_kd = Some(o);
        feat_kd = Some(f);
    }
    Ok(FtTerms {
        total,
        diff,
        out_kd,
        feat_kd,
    })
}

pub fn out_kd_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    let x_t = forward_noise(batch, sched)?;
    check_dims(teacher.model, student)?;
    let tp = teacher.predict(&x_t, &batch.t, &batch.c)?;
    let sp = student.predict(tape, store, &x_t, &batch.t, &batch.c)?;
    out_kd_from(tape, sp.eps, &tp.eps)
}

pub fn feat_kd_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    let x_t = forward_noise(batch, sched)?;
    let tp = teacher.predict(&x_t, &batch.t, &batch.c)?;
    let sp = student.predict(tape, store, &x_t, &batch.t, &batch.c)?;
    feat_kd_from(tape, &sp.trace, &tp.trace)
}

pub fn ft_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
    w: &FtWeights,
) -> Result<FtTerms> {
    let x_t = forward_noise(batch, sched)?;
    let tp = if w.needs_teacher() {
        check_dims(teacher.model, student)?;
        Some(teacher.predict(&x_t, &batch.t, &batch.c)?)
    } else {
        None
    };
    let sp = student.predict(tape, store, &x_t, &batch.t, &batch.c)?;
    ft_loss_from(tape, &sp, tp.as_ref(), batch, sched, w)
}

fn check_dims<S: Scalar>(teacher: &Denoiser<S>, student: &Denoiser<S>) -> Result<()> {
    let (a, b) = (teacher.config().input_dim, student.config().input_dim);
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "distillation",
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

/// Regression target for unlearning, computed from the frozen teacher with a
/// single batched call. Anchor ablation: `ε_T(x_t, t, c′)`. Negative guidance:
/// `ε_T(x_t, t, ∅) − η (ε_T(x_t, t, c) − ε_T(x_t, t, ∅))`.
pub fn unlearn_target<S: Scalar>(
    teacher: &Frozen<'_, S>,
    x_t: &Tensor<S>,
    t: &[usize],
    spec: &UnlearnSpec,
) -> Result<Tensor<S>> {
    let n = x_t.rows();
    match spec.mode {
        UnlearnMode::AnchorAblation => Ok(teacher.predict(x_t, t, &vec![spec.anchor; n])?.eps),
        UnlearnMode::NegativeGuidance => {
            let both = Tensor::concat_rows(&[x_t, x_t])?;
            let tt: Vec<usize> = t.iter().chain(t).copied().collect();
            let mut cc = vec![spec.target; n];
            cc.extend(std::iter::repeat_n(NULL_CONCEPT, n));
            let out = teacher.predict(&both, &tt, &cc)?.eps;
            let cond = out.slice_rows(0, n)?;
            let uncond = out.slice_rows(n, n)?;
            Ok(negative_guidance_combine(
                &cond,
                &uncond,
                S::lit(spec.guidance_eta),
            ))
        }
    }
}

/// `ε_∅ − η (ε_c − ε_∅)`
pub fn negative_guidance_combine<S: Scalar>(
    cond: &Tensor<S>,
    uncond: &Tensor<S>,
    eta: S,
) -> Tensor<S> {
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| u - eta * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data).expect("same shape as inputs")
}

/// `mean_b ‖ε_S(x_t, t, c) − target‖²` with `target` held constant.
pub fn cu_loss_from<S: Scalar>(
    tape: &mut Tape<S>,
    student_eps: Var,
    target: &Tensor<S>,
) -> Result<Var> {
    let t = tape.constant(target.clone())?;
    weighted_row_sq_error(tape, student_eps, t, None)
}

fn check_unlearn_batch<S: Scalar>(
    batch: &DiffusionBatch<S>,
    spec: &UnlearnSpec,
    want: UnlearnMode,
    concept_count: usize,
) -> Result<()> {
    spec.validate(concept_count)?;
    if spec.mode != want {
        return Err(invalid(format!(
            "expected {want:?} spec, got {:?}",
            spec.mode
        )));
    }
    if let Some(&c) = batch.c.iter().find(|&&c| c != spec.target) {
        return Err(invalid(format!(
            "unlearning batch contains concept {c}, expected only target {}",
            spec.target
        )));
    }
    Ok(())
}

fn cu_loss_impl<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    spec: &UnlearnSpec,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    check_dims(teacher.model, student)?;
    let x_t = forward_noise(batch, sched)?;
    let target = unlearn_target(teacher, &x_t, &batch.t, spec)?;
    let sp = student.predict(tape, store, &x_t, &batch.t, &batch.c)?;
    cu_loss_from(tape, sp.eps, &target)
}

/// Anchor ablation: `mean ‖ε_T(x_t, t, c′) − ε_S(x_t, t, c)‖²`.
pub fn cu_anchor_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    spec: &UnlearnSpec,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    check_unlearn_batch(
        batch,
        spec,
        UnlearnMode::AnchorAblation,
        student.config().concept_count,
    )?;
    cu_loss_impl(tape, teacher, student, store, batch, spec, sched)
}

/// Negative guidance: regress `ε_S(x_t, t, c)` onto the guided-away teacher target.
pub fn cu_negative_guidance_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    spec: &UnlearnSpec,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    check_unlearn_batch(
        batch,
        spec,
        UnlearnMode::NegativeGuidance,
        student.config().concept_count,
    )?;
    cu_loss_impl(tape, teacher, student, store, batch, spec, sched)
}

/// Dispatches on `spec.mode`.
pub fn cu_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &Frozen<'_, S>,
    student: &Denoiser<S>,
    store: &ParamStore<S>,
    batch: &DiffusionBatch<S>,
    spec: &UnlearnSpec,
    sched: &NoiseSchedule<S>,
) -> Result<Var> {
    match spec.mode {
        UnlearnMode::AnchorAblation => {
            cu_anchor_loss(tape, teacher, student, store, batch, spec, sched)
        }
        UnlearnMode::NegativeGuidance => {
            cu_negative_guidance_loss(tape, teacher, student, store, batch, spec, sched)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rng::RngStream;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            input_dim: 2,
            hidden: vec![6, 5],
            time_embed_dim: 4,
            concept_count: 4,
            concept_embed_dim: 3,
            feature_taps: vec![0, 1],
            time_max_period: 1000.0,
        }
    }

    #[test]
    fn hand_fixed_output_distillation() {
        let mut tape = Tape::<f64>::new();
        let s = tape
            .constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let l = out_kd_from(&mut tape, s, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 2.0);
    }

    #[test]
    fn hand_fixed_single_tap() {
        let mut tape = Tape::<f64>::new();
        let sv = tape
            .constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let student = FeatureTrace {
            taps: vec![(1, sv)],
        };
        let teacher = FeatureTrace {
            taps: vec![(
                1,
                Tensor::from_rows(&[vec![1.0, 0.0, 3.0], vec![1.0, 1.0, 1.0]]).unwrap(),
            )],
        };
        let l = feat_kd_from(&mut tape, &student, &teacher).unwrap();
        // rows: 4 and 3, mean 3.5
        assert_eq!(tape.scalar_value(l).unwrap(), 3.5);
        let bad = FeatureTrace {
            taps: vec![(2, Tensor::zeros(&[2, 3]))],
        };
        assert!(matches!(
            feat_kd_from(&mut tape, &student, &bad),
            Err(Error::TapMismatch { .. })
        ));
    }

    #[test]
    fn negative_guidance_with_zero_eta_is_null_anchor_ablation() {
        let model = Denoiser::<f64>::new(cfg()).unwrap();
        let teacher_store = model.init(&mut RngStream::root(1));
        let student = model.init(&mut RngStream::root(2));
        let teacher = Frozen::new(&model, &teacher_store);
        let sched = NoiseSchedule::vp_linear(20, 1e-2, 0.3).unwrap();
        let x0 = RngStream::root(3).normal_tensor(&[3, 2]);
        let batch =
            DiffusionBatch::sample(x0, vec![2; 3], &sched, &mut RngStream::root(4)).unwrap();
        let mut ng = UnlearnSpec::negative_guidance(2);
        ng.guidance_eta = 0.0;
        let anchor = UnlearnSpec::anchor_ablation(2, NULL_CONCEPT);
        let mut tape = Tape::new();
        let a =
            cu_negative_guidance_loss(&mut tape, &teacher, &model, &student, &batch, &ng, &sched)
                .unwrap();
        let b = cu_anchor_loss(
            &mut tape, &teacher, &model, &student, &batch, &anchor, &sched,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(a).unwrap(), tape.scalar_value(b).unwrap());
    }

    #[test]
    fn unlearn_spec_validation() {
        assert!(UnlearnSpec::anchor_ablation(1, 1).validate(4).is_err());
        assert!(UnlearnSpec::negative_guidance(0).validate(4).is_err());
        assert!(UnlearnSpec::negative_guidance(4).validate(4).is_err());
        assert!(UnlearnSpec::anchor_ablation(1, 2).validate(4).is_ok());
    }

    #[test]
    fn unlearning_batch_must_hold_only_target() {
        let model = Denoiser::<f64>::new(cfg()).unwrap();
        let store = model.init(&mut RngStream::root(1));
        let teacher = Frozen::new(&model, &store);
        let sched = NoiseSchedule::vp_linear(20, 1e-2, 0.3).unwrap();
        let x0 = RngStream::root(3).normal_tensor(&[2, 2]);
        let batch =
            DiffusionBatch::sample(x0, vec![1, 2], &sched, &mut RngStream::root(4)).unwrap();
        let mut tape = Tape::new();
        let spec = UnlearnSpec::anchor_ablation(1, 3);
        assert!(
            cu_anchor_loss(&mut tape, &teacher, &model, &store, &batch, &spec, &sched).is_err()
        );
    }

    #[test]
    fn weights_validation() {
        assert!(FtWeights {
            w_diff: 1.0,
            w_outkd: -1.0,
            w_featkd: 0.0
        }
        .validate()
        .is_err());
        assert!(!FtWeights::without_distill().needs_teacher());
        assert_eq!(FtWeights::default().w_outkd, 2.0);
    }
}
