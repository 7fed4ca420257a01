//! Penalized bilevel fine-tuning with concept unlearning.
//!
//! The upper variable `θ` minimizes
//! `G_λ(θ, ϑ) = L^CU(θ) + λ (L^ft(θ) − L^ft(ϑ))` while the shadow `ϑ`
//! maximizes it, which is the same as minimizing `L^ft(ϑ)`. The double loop
//! alternates `K` descent steps on `ϑ` with one descent step on `θ`. The
//! `−λ L^ft(ϑ)` term is constant in `θ`, so it never enters a `θ` gradient;
//! `L^ft(ϑ)` is evaluated only to log the constraint gap.
//!
//! Batch streams are split by purpose (`lower`, `upper-cu`, `upper-ft`) so
//! that the unlearning batches seen by `θ` do not depend on `K` or on the
//! fine-tuning draws. The two-stage baseline draws its unlearning batches
//! from the same `upper-cu` stream.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::denoiser::{Denoiser, FeatureTrace, Prediction, NULL_CONCEPT};
use crate::diffusion::{forward_noise, DiffusionBatch, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::objectives::{
    cu_loss_from, ft_loss_from, negative_guidance_combine, unlearn_target, Frozen, FtWeights,
    UnlearnMode, UnlearnSpec,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{ParamKind, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarthetaPolicy {
    /// `ϑ` carries over from one upper iteration to the next.
    #[default]
    PersistentShadow,
    /// `ϑ ← θ` after every upper step.
    ResyncAfterUpper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    /// Upper iterations.
    pub e: usize,
    /// Lower iterations per upper iteration.
    pub k: usize,
    pub lambda: f64,
    /// Lower learning rate.
    pub eta: f64,
    /// Upper learning rate.
    pub zeta: f64,
    #[serde(default)]
    pub vartheta_policy: VarthetaPolicy,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Evaluate `L^ft(ϑ)` on each upper batch for the logged gap. Costs one
    /// extra `ϑ` forward per upper step, counted as diagnostic.
    #[serde(default = "default_true")]
    pub log_gap: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            e: 250,
            k: 20,
            lambda: 100.0,
            eta: 1e-3,
            zeta: 2e-4,
            vartheta_policy: VarthetaPolicy::PersistentShadow,
            optimizer: OptimizerKind::Sgd,
            log_gap: true,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e == 0 || self.k == 0 {
            return Err(invalid("E and K must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0 && self.zeta.is_finite() && self.zeta >= 0.0) {
            return Err(invalid("learning rates must be finite and non-negative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid("penalty must be finite and non-negative"));
        }
        Ok(())
    }

    /// Lower plus upper iterations: `E·K + E`.
    pub fn total_iterations(&self) -> usize {
        self.e * self.k + self.e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageConfig {
    /// Fine-tuning iterations.
    pub n: usize,
    /// Unlearning iterations.
    pub m: usize,
    pub ft_lr: f64,
    pub cu_lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl TwoStageConfig {
    pub fn total_iterations(&self) -> usize {
        self.n + self.m
    }

    /// Same total budget and learning rates as `b`: `M = E`, `N = E·K`.
    pub fn matched_to(b: &BilevelConfig) -> Self {
        Self {
            n: b.e * b.k,
            m: b.e,
            ft_lr: b.eta,
            cu_lr: b.zeta,
            optimizer: b.optimizer,
        }
    }
}

/// Model forward calls, one per batched evaluation of a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FwdCounts {
    pub teacher: u64,
    pub theta: u64,
    pub vartheta: u64,
    /// Passes made only for logging; never needed by an update.
    pub diagnostic: u64,
}

impl FwdCounts {
    /// Passes that updates depend on.
    pub fn training_total(&self) -> u64 {
        self.teacher + self.theta + self.vartheta
    }

    pub fn since(&self, earlier: &FwdCounts) -> FwdCounts {
        FwdCounts {
            teacher: self.teacher - earlier.teacher,
            theta: self.theta - earlier.theta,
            vartheta: self.vartheta - earlier.vartheta,
            diagnostic: self.diagnostic - earlier.diagnostic,
        }
    }
}

/// Which parameter set a fine-tuning evaluation runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Theta,
    Vartheta,
    Diagnostic,
}

impl FwdCounts {
    fn bump(&mut self, role: Role) {
        match role {
            Role::Theta => self.theta += 1,
            Role::Vartheta => self.vartheta += 1,
            Role::Diagnostic => self.diagnostic += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Lower,
    Upper,
    Finetune,
    Unlearn,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Lower => "lower",
            StepKind::Upper => "upper",
            StepKind::Finetune => "finetune",
            StepKind::Unlearn => "unlearn",
        })
    }
}

/// One row of run history. Counts are cumulative at the end of the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_kind: StepKind,
    pub e: usize,
    pub k: usize,
    #[serde(rename = "L_cu")]
    pub l_cu: Option<f64>,
    #[serde(rename = "L_ft_theta")]
    pub l_ft_theta: Option<f64>,
    #[serde(rename = "L_ft_vartheta")]
    pub l_ft_vartheta: Option<f64>,
    pub gap: Option<f64>,
    pub fwd_teacher: u64,
    pub fwd_theta: u64,
    pub fwd_vartheta: u64,
}

impl StepRecord {
    fn new(kind: StepKind, e: usize, k: usize, fwd: &FwdCounts) -> Self {
        Self {
            step_kind: kind,
            e,
            k,
            l_cu: None,
            l_ft_theta: None,
            l_ft_vartheta: None,
            gap: None,
            fwd_teacher: fwd.teacher,
            fwd_theta: fwd.theta,
            fwd_vartheta: fwd.vartheta,
        }
    }
}

/// Losses from one upper evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpperEval<S> {
    pub l_cu: S,
    pub l_ft_theta: S,
    /// `L^ft(ϑ)` on the same fine-tuning batch, when requested.
    pub l_ft_vartheta: Option<S>,
}

/// A bilevel instance: a fine-tuning loss, an unlearning loss, and their
/// minibatch samplers. Gradient methods accumulate into the store's grads.
pub trait BilevelProblem<S: Scalar> {
    /// `∇L^ft` on a fresh fine-tuning batch. Returns `L^ft`.
    fn ft_grad(
        &mut self,
        params: &mut ParamStore<S>,
        role: Role,
        rng: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<S>;

    /// `∇_θ (L^CU + λ L^ft)` with the unlearning batch from `rng_cu` and the
    /// fine-tuning batch from `rng_ft`; `L^ft(ϑ)` is evaluated on that same
    /// fine-tuning batch when `vartheta` is given.
    fn upper_grad(
        &mut self,
        theta: &mut ParamStore<S>,
        vartheta: Option<&ParamStore<S>>,
        lambda: S,
        rng_cu: &mut RngStream,
        rng_ft: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<UpperEval<S>>;

    /// `∇L^CU` alone on a batch from `rng_cu`. Returns `L^CU`.
    fn cu_grad(
        &mut self,
        theta: &mut ParamStore<S>,
        rng_cu: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<S>;
}

/// Independent minibatch streams of one run.
#[derive(Clone, Debug)]
pub struct Streams {
    pub lower: RngStream,
    pub upper_cu: RngStream,
    pub upper_ft: RngStream,
}

impl Streams {
    pub fn new(root: &RngStream) -> Self {
        Self {
            lower: root.derive("lower"),
            upper_cu: root.derive("upper-cu"),
            upper_ft: root.derive("upper-ft"),
        }
    }
}

pub struct BilevelState<S> {
    pub theta: ParamStore<S>,
    pub vartheta: ParamStore<S>,
    pub e: usize,
    pub k: usize,
    pub history: Vec<StepRecord>,
    pub fwd: FwdCounts,
    pub streams: Streams,
    lower_opt: Optimizer<S>,
    upper_opt: Optimizer<S>,
}

impl<S: Scalar> BilevelState<S> {
    /// Both stores start as copies of `init` and share its masks.
    pub fn new(init: &ParamStore<S>, cfg: &BilevelConfig, rng: &RngStream) -> Self {
        Self {
            theta: init.clone(),
            vartheta: init.clone(),
            e: 0,
            k: 0,
            history: Vec::new(),
            fwd: FwdCounts::default(),
            streams: Streams::new(rng),
            lower_opt: Optimizer::new(cfg.optimizer),
            upper_opt: Optimizer::new(cfg.optimizer),
        }
    }

    fn step_id(&self, cfg: &BilevelConfig) -> usize {
        self.e * (cfg.k + 1) + self.k
    }
}

fn ensure_finite<S: Scalar>(store: &ParamStore<S>, stage: &'static str, step: usize) -> Result<()> {
    if store.grads_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { stage, step })
    }
}

/// `ϑ ← ϑ − η ∇L^ft(ϑ)` on one fine-tuning batch.
pub fn lower_step<S: Scalar, P: BilevelProblem<S>>(
    state: &mut BilevelState<S>,
    problem: &mut P,
    cfg: &BilevelConfig,
) -> Result<()> {
    let step = state.step_id(cfg);
    state.vartheta.zero_grad();
    let loss = problem.ft_grad(
        &mut state.vartheta,
        Role::Vartheta,
        &mut state.streams.lower,
        &mut state.fwd,
    )?;
    ensure_finite(&state.vartheta, "lower", step)?;
    state.lower_opt.step(&mut state.vartheta, S::lit(cfg.eta));
    let mut rec = StepRecord::new(StepKind::Lower, state.e, state.k, &state.fwd);
    rec.l_ft_vartheta = Some(loss.as_f64());
    state.history.push(rec);
    state.k += 1;
    Ok(())
}

/// `θ ← θ − ζ ∇_θ G_λ(θ, ϑ)` on one unlearning batch and one fine-tuning batch.
pub fn upper_step<S: Scalar, P: BilevelProblem<S>>(
    state: &mut BilevelState<S>,
    problem: &mut P,
    cfg: &BilevelConfig,
) -> Result<()> {
    let step = state.step_id(cfg);
    state.theta.zero_grad();
    let vartheta = cfg.log_gap.then_some(&state.vartheta);
    let ev = problem.upper_grad(
        &mut state.theta,
        vartheta,
        S::lit(cfg.lambda),
        &mut state.streams.upper_cu,
        &mut state.streams.upper_ft,
        &mut state.fwd,
    )?;
    ensure_finite(&state.theta, "upper", step)?;
    state.upper_opt.step(&mut state.theta, S::lit(cfg.zeta));
    if cfg.vartheta_policy == VarthetaPolicy::ResyncAfterUpper {
        state.vartheta.copy_values_from(&state.theta)?;
    }
    let mut rec = StepRecord::new(StepKind::Upper, state.e, state.k, &state.fwd);
    rec.l_cu = Some(ev.l_cu.as_f64());
    rec.l_ft_theta = Some(ev.l_ft_theta.as_f64());
    if let Some(v) = ev.l_ft_vartheta {
        rec.l_ft_vartheta = Some(v.as_f64());
        rec.gap = Some((ev.l_ft_theta - v).as_f64());
    }
    state.history.push(rec);
    state.e += 1;
    state.k = 0;
    Ok(())
}

/// `E` upper iterations, each preceded by `K` lower iterations. `observe`
/// sees every record together with the current `θ`.
pub fn run_bilevel_observed<S: Scalar, P: BilevelProblem<S>>(
    init: &ParamStore<S>,
    problem: &mut P,
    cfg: &BilevelConfig,
    rng: &RngStream,
    mut observe: impl FnMut(&StepRecord, &ParamStore<S>) -> Result<()>,
) -> Result<BilevelState<S>> {
    cfg.validate()?;
    let mut state = BilevelState::new(init, cfg, rng);
    for _ in 0..cfg.e {
        for _ in 0..cfg.k {
            lower_step(&mut state, problem, cfg)?;
            observe(state.history.last().expect("just pushed"), &state.theta)?;
        }
        upper_step(&mut state, problem, cfg)?;
        observe(state.history.last().expect("just pushed"), &state.theta)?;
    }
    Ok(state)
}

pub fn run_bilevel<S: Scalar, P: BilevelProblem<S>>(
    init: &ParamStore<S>,
    problem: &mut P,
    cfg: &BilevelConfig,
    rng: &RngStream,
) -> Result<BilevelState<S>> {
    run_bilevel_observed(init, problem, cfg, rng, |_, _| Ok(()))
}

pub struct TwoStageOutput<S> {
    pub theta: ParamStore<S>,
    pub history: Vec<StepRecord>,
    pub fwd: FwdCounts,
    pub total_iterations: usize,
}

/// `N` fine-tuning steps on `θ`, then `M` unlearning steps on `θ`.
pub fn run_two_stage_observed<S: Scalar, P: BilevelProblem<S>>(
    init: &ParamStore<S>,
    problem: &mut P,
    cfg: &TwoStageConfig,
    rng: &RngStream,
    mut observe: impl FnMut(&StepRecord, &ParamStore<S>) -> Result<()>,
) -> Result<TwoStageOutput<S>> {
    let mut streams = Streams::new(rng);
    let mut theta = init.clone();
    let mut fwd = FwdCounts::default();
    let mut history = Vec::with_capacity(cfg.n + cfg.m);
    let mut opt = Optimizer::new(cfg.optimizer);
    for i in 0..cfg.n {
        theta.zero_grad();
        let loss = problem.ft_grad(&mut theta, Role::Theta, &mut streams.lower, &mut fwd)?;
        ensure_finite(&theta, "finetune", i)?;
        opt.step(&mut theta, S::lit(cfg.ft_lr));
        let mut rec = StepRecord::new(StepKind::Finetune, 0, i, &fwd);
        rec.l_ft_theta = Some(loss.as_f64());
        history.push(rec);
        observe(history.last().expect("just pushed"), &theta)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    for i in 0..cfg.m {
        theta.zero_grad();
        let loss = problem.cu_grad(&mut theta, &mut streams.upper_cu, &mut fwd)?;
        ensure_finite(&theta, "unlearn", cfg.n + i)?;
        opt.step(&mut theta, S::lit(cfg.cu_lr));
        let mut rec = StepRecord::new(StepKind::Unlearn, i, 0, &fwd);
        rec.l_cu = Some(loss.as_f64());
        history.push(rec);
        observe(history.last().expect("just pushed"), &theta)?;
    }
    Ok(TwoStageOutput {
        theta,
        history,
        fwd,
        total_iterations: cfg.total_iterations(),
    })
}

pub fn run_two_stage<S: Scalar, P: BilevelProblem<S>>(
    init: &ParamStore<S>,
    problem: &mut P,
    cfg: &TwoStageConfig,
    rng: &RngStream,
) -> Result<TwoStageOutput<S>> {
    run_two_stage_observed(init, problem, cfg, rng, |_, _| Ok(()))
}

/// History as CSV with columns
/// `step_kind,e,k,L_cu,L_ft_theta,L_ft_vartheta,gap,fwd_teacher,fwd_theta,fwd_vartheta`.
pub fn write_history_csv<W: std::io::Write>(w: W, history: &[StepRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in history {
        out.serialize(r)
            .map_err(|e| invalid(format!("history csv: {e}")))?;
    }
    out.flush()
        .map_err(|e| invalid(format!("history csv: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Quadratic instance

pub const QUAD_PARAM: &str = "theta";

/// `L^ft(θ) = ½ θᵀQθ − bᵀθ`, `L^CU(θ) = ½ ‖θ − a‖²`. Every evaluation is
/// full-batch; the streams are ignored.
#[derive(Clone, Debug)]
pub struct QuadraticProblem<S> {
    q: Tensor<S>,
    b: Vec<S>,
    a: Vec<S>,
}

impl<S: Scalar> QuadraticProblem<S> {
    pub fn new(a: Vec<S>, q: Tensor<S>, b: Vec<S>) -> Result<Self> {
        let n = a.len();
        if q.shape() != [n, n] || b.len() != n {
            return Err(Error::ShapeMismatch {
                op: "quadratic problem",
                left: q.shape().to_vec(),
                right: vec![n, n],
            });
        }
        Ok(Self { q, b, a })
    }

    pub fn store(&self, theta: Vec<S>) -> ParamStore<S> {
        let mut s = ParamStore::new();
        s.insert(QUAD_PARAM, Tensor::vector(theta), ParamKind::Weight);
        s
    }

    fn q_times(&self, x: &[S]) -> Vec<S> {
        let n = x.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.q.data()[i * n + j] * x[j])
                    .fold(S::zero(), |a, b| a + b)
            })
            .collect()
    }

    pub fn ft_value(&self, x: &[S]) -> S {
        let qx = self.q_times(x);
        let half = S::lit(0.5);
        x.iter()
            .zip(&qx)
            .zip(&self.b)
            .fold(S::zero(), |acc, ((&xi, &qi), &bi)| {
                acc + half * xi * qi - bi * xi
            })
    }

    fn ft_gradient(&self, x: &[S]) -> Vec<S> {
        self.q_times(x)
            .into_iter()
            .zip(&self.b)
            .map(|(qi, &bi)| qi - bi)
            .collect()
    }

    pub fn cu_value(&self, x: &[S]) -> S {
        let half = S::lit(0.5);
        x.iter().zip(&self.a).fold(S::zero(), |acc, (&xi, &ai)| {
            acc + half * (xi - ai) * (xi - ai)
        })
    }
}

impl<S: Scalar> BilevelProblem<S> for QuadraticProblem<S> {
    fn ft_grad(
        &mut self,
        params: &mut ParamStore<S>,
        role: Role,
        _rng: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<S> {
        fwd.bump(role);
        let x = params.value(QUAD_PARAM)?.data().to_vec();
        params.accumulate_grad(QUAD_PARAM, &Tensor::vector(self.ft_gradient(&x)))?;
        Ok(self.ft_value(&x))
    }

    fn upper_grad(
        &mut self,
        theta: &mut ParamStore<S>,
        vartheta: Option<&ParamStore<S>>,
        lambda: S,
        _rng_cu: &mut RngStream,
        _rng_ft: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<UpperEval<S>> {
        fwd.theta += 1;
        let x = theta.value(QUAD_PARAM)?.data().to_vec();
        let g: Vec<S> = self
            .ft_gradient(&x)
            .into_iter()
            .zip(x.iter().zip(&self.a))
            .map(|(gf, (&xi, &ai))| (xi - ai) + lambda * gf)
            .collect();
        theta.accumulate_grad(QUAD_PARAM, &Tensor::vector(g))?;
        let l_ft_vartheta = match vartheta {
            Some(v) => {
                fwd.diagnostic += 1;
                Some(self.ft_value(v.value(QUAD_PARAM)?.data()))
            }
            None => None,
        };
        Ok(UpperEval {
            l_cu: self.cu_value(&x),
            l_ft_theta: self.ft_value(&x),
            l_ft_vartheta,
        })
    }

    fn cu_grad(
        &mut self,
        theta: &mut ParamStore<S>,
        _rng_cu: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<S> {
        fwd.theta += 1;
        let x = theta.value(QUAD_PARAM)?.data().to_vec();
        let g: Vec<S> = x.iter().zip(&self.a).map(|(&xi, &ai)| xi - ai).collect();
        theta.accumulate_grad(QUAD_PARAM, &Tensor::vector(g))?;
        Ok(self.cu_value(&x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadRow {
    pub lambda: f64,
    pub penalized: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadReference {
    /// Projection of `a` onto `{θ : Qθ = b}`.
    pub bilevel: Vec<f64>,
    pub rows: Vec<QuadRow>,
}

/// Exact solutions of the quadratic instance: the bilevel solution and, per
/// `λ`, the penalized minimizer `(I + λQ)⁻¹ (a + λb)`.
pub fn quad_bilevel_reference(
    a: &[f64],
    q: &[f64],
    b: &[f64],
    lambdas: &[f64],
) -> Result<QuadReference> {
    let n = a.len();
    if q.len() != n * n || b.len() != n {
        return Err(invalid("Q must be n×n and b of length n"));
    }
    let qm = DMatrix::from_row_slice(n, n, q);
    if (&qm - qm.transpose()).abs().max() > 1e-12 {
        return Err(invalid("Q must be symmetric"));
    }
    if qm.symmetric_eigenvalues().min() < -1e-12 {
        return Err(invalid("Q must be positive semidefinite"));
    }
    let av = DVector::from_column_slice(a);
    let bv = DVector::from_column_slice(b);
    let tol = 1e-10 * (1.0 + qm.abs().max());
    let pinv = qm
        .clone()
        .pseudo_inverse(tol)
        .map_err(|e| invalid(e.to_string()))?;
    let particular = &pinv * &bv;
    if (&qm * &particular - &bv).norm() > 1e-9 * (1.0 + bv.norm()) {
        return Err(invalid(
            "b is not in the range of Q; the lower problem is unbounded",
        ));
    }
    let bilevel = &av - &pinv * (&qm * &av - &bv);
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(invalid("λ must be finite and non-negative"));
        }
        let lhs = DMatrix::<f64>::identity(n, n) + &qm * lambda;
        let rhs = &av + &bv * lambda;
        let sol = lhs
            .cholesky()
            .ok_or_else(|| invalid("I + λQ is not positive definite"))?
            .solve(&rhs);
        rows.push(QuadRow {
            lambda,
            distance: (&sol - &bilevel).norm(),
            penalized: sol.iter().copied().collect(),
        });
    }
    Ok(QuadReference {
        bilevel: bilevel.iter().copied().collect(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Diffusion instance

/// Fine-tuning and unlearning for a (pruned) student against a frozen teacher.
pub struct DiffusionProblem<'a, S> {
    pub model: &'a Denoiser<S>,
    /// Required whenever distillation weights are non-zero or unlearning runs.
    pub teacher: Option<Frozen<'a, S>>,
    pub sched: &'a NoiseSchedule<S>,
    /// Fine-tuning data.
    pub ft_data: &'a LabeledSet<S>,
    /// Clean rows of the target concept, used to build unlearning batches.
    pub cu_data: &'a Tensor<S>,
    pub weights: FtWeights,
    pub unlearn: UnlearnSpec,
    pub batch_size: usize,
    /// Probability of replacing a fine-tuning label with the null concept.
    pub null_prob: f64,
}

/// Minibatches of one upper step.
#[derive(Clone, Debug)]
pub struct UpperBatch<S> {
    pub cu: DiffusionBatch<S>,
    pub ft: DiffusionBatch<S>,
}

/// Tape nodes of one upper evaluation.
#[derive(Clone, Copy, Debug)]
pub struct UpperTerms {
    /// `L^CU + λ L^ft`, the `θ`-dependent part of `G_λ`.
    pub objective: Var,
    pub l_cu: Var,
    pub l_ft: Var,
}

fn slice_prediction<S: Scalar>(
    p: &Prediction<Tensor<S>>,
    start: usize,
    len: usize,
) -> Result<Prediction<Tensor<S>>> {
    Ok(Prediction {
        eps: p.eps.slice_rows(start, len)?,
        trace: FeatureTrace {
            taps: p
                .trace
                .taps
                .iter()
                .map(|(i, t)| Ok((*i, t.slice_rows(start, len)?)))
                .collect::<Result<_>>()?,
        },
    })
}

impl<'a, S: Scalar> DiffusionProblem<'a, S> {
    fn teacher(&self) -> Result<&Frozen<'a, S>> {
        self.teacher
            .as_ref()
            .ok_or_else(|| invalid("this objective needs a teacher"))
    }

    pub fn sample_ft(&self, rng: &mut RngStream) -> Result<DiffusionBatch<S>> {
        let mb = self
            .ft_data
            .minibatch(self.batch_size, self.null_prob, rng)?;
        DiffusionBatch::sample(mb.x, mb.c, self.sched, rng)
    }

    pub fn sample_cu(&self, rng: &mut RngStream) -> Result<DiffusionBatch<S>> {
        let n = self.cu_data.rows();
        if n == 0 {
            return Err(invalid("no target-concept rows to unlearn from"));
        }
        let rows: Vec<Vec<S>> = (0..self.batch_size)
            .map(|_| self.cu_data.row(rng.index(n)).to_vec())
            .collect();
        DiffusionBatch::sample(
            Tensor::from_rows(&rows)?,
            vec![self.unlearn.target; self.batch_size],
            self.sched,
            rng,
        )
    }

    pub fn sample_upper(
        &self,
        rng_cu: &mut RngStream,
        rng_ft: &mut RngStream,
    ) -> Result<UpperBatch<S>> {
        Ok(UpperBatch {
            cu: self.sample_cu(rng_cu)?,
            ft: self.sample_ft(rng_ft)?,
        })
    }

    /// Records `L^ft` of `params` on `batch`.
    pub fn record_ft(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        batch: &DiffusionBatch<S>,
        fwd: &mut FwdCounts,
        role: Role,
    ) -> Result<Var> {
        let x_t = forward_noise(batch, self.sched)?;
        let tp = if self.weights.needs_teacher() {
            fwd.teacher += 1;
            Some(self.teacher()?.predict(&x_t, &batch.t, &batch.c)?)
        } else {
            None
        };
        fwd.bump(role);
        let sp = self.model.predict(tape, params, &x_t, &batch.t, &batch.c)?;
        Ok(ft_loss_from(tape, &sp, tp.as_ref(), batch, self.sched, &self.weights)?.total)
    }

    /// Records `L^CU` of `theta` on an unlearning batch.
    pub fn record_cu(
        &self,
        tape: &mut Tape<S>,
        theta: &ParamStore<S>,
        batch: &DiffusionBatch<S>,
        fwd: &mut FwdCounts,
    ) -> Result<Var> {
        let x_t = forward_noise(batch, self.sched)?;
        fwd.teacher += 1;
        let target = unlearn_target(self.teacher()?, &x_t, &batch.t, &self.unlearn)?;
        fwd.theta += 1;
        let sp = self.model.predict(tape, theta, &x_t, &batch.t, &batch.c)?;
        cu_loss_from(tape, sp.eps, &target)
    }

    /// Records `L^CU(θ) + λ L^ft(θ)` with one teacher call and one `θ` call
    /// over the stacked batch (unlearning rows first).
    pub fn record_upper(
        &self,
        tape: &mut Tape<S>,
        theta: &ParamStore<S>,
        batch: &UpperBatch<S>,
        lambda: S,
        fwd: &mut FwdCounts,
    ) -> Result<UpperTerms> {
        let spec = &self.unlearn;
        spec.validate(self.model.config().concept_count)?;
        let (ncu, nft) = (batch.cu.len(), batch.ft.len());
        let xcu = forward_noise(&batch.cu, self.sched)?;
        let xft = forward_noise(&batch.ft, self.sched)?;

        // Teacher rows: [cu @ anchor-or-target, (cu @ null), (ft @ c)].
        let mut parts = vec![&xcu];
        let mut tt = batch.cu.t.clone();
        let first = match spec.mode {
            UnlearnMode::AnchorAblation => spec.anchor,
            UnlearnMode::NegativeGuidance => spec.target,
        };
        let mut tc = vec![first; ncu];
        if spec.mode == UnlearnMode::NegativeGuidance {
            parts.push(&xcu);
            tt.extend_from_slice(&batch.cu.t);
            tc.extend(std::iter::repeat_n(NULL_CONCEPT, ncu));
        }
        let ft_offset = tc.len();
        let distill = self.weights.needs_teacher();
        if distill {
            parts.push(&xft);
            tt.extend_from_slice(&batch.ft.t);
            tc.extend_from_slice(&batch.ft.c);
        }
        fwd.teacher += 1;
        let tout = self
            .teacher()?
            .predict(&Tensor::concat_rows(&parts)?, &tt, &tc)?;
        let target = match spec.mode {
            UnlearnMode::AnchorAblation => tout.eps.slice_rows(0, ncu)?,
            UnlearnMode::NegativeGuidance => negative_guidance_combine(
                &tout.eps.slice_rows(0, ncu)?,
                &tout.eps.slice_rows(ncu, ncu)?,
                S::lit(spec.guidance_eta),
            ),
        };
        let teacher_ft = if distill {
            Some(slice_prediction(&tout, ft_offset, nft)?)
        } else {
            None
        };

        fwd.theta += 1;
        let both = Tensor::concat_rows(&[&xcu, &xft])?;
        let t: Vec<usize> = batch.cu.t.iter().chain(&batch.ft.t).copied().collect();
        let c: Vec<usize> = batch.cu.c.iter().chain(&batch.ft.c).copied().collect();
        let sp = self.model.predict(tape, theta, &both, &t, &c)?;
        let eps_cu = tape.slice(sp.eps, 0, 0, ncu)?;
        let l_cu = cu_loss_from(tape, eps_cu, &target)?;
        let eps_ft = tape.slice(sp.eps, 0, ncu, nft)?;
        let mut taps = Vec::with_capacity(sp.trace.len());
        for &(i, v) in &sp.trace.taps {
            taps.push((i, tape.slice(v, 0, ncu, nft)?));
        }
        let ft_pred = Prediction {
            eps: eps_ft,
            trace: FeatureTrace { taps },
        };
        let l_ft = ft_loss_from(
            tape,
            &ft_pred,
            teacher_ft.as_ref(),
            &batch.ft,
            self.sched,
            &self.weights,
        )?
        .total;
        let pen = tape.scale(l_ft, lambda)?;
        let objective = tape.add(l_cu, pen)?;
        Ok(UpperTerms {
            objective,
            l_cu,
            l_ft,
        })
    }

    /// `L^ft` of `params` on a batch, off-tape.
    pub fn ft_value(
        &self,
        params: &ParamStore<S>,
        batch: &DiffusionBatch<S>,
        fwd: &mut FwdCounts,
        role: Role,
    ) -> Result<S> {
        let mut tape = Tape::new();
        let l = self.record_ft(&mut tape, params, batch, fwd, role)?;
        tape.scalar_value(l)
    }
}

impl<S: Scalar> BilevelProblem<S> for DiffusionProblem<'_, S> {
    fn ft_grad(
        &mut self,
        params: &mut ParamStore<S>,
        role: Role,
        rng: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<S> {
        let batch = self.sample_ft(rng)?;
        let mut tape = Tape::new();
        let l = self.record_ft(&mut tape, params, &batch, fwd, role)?;
        tape.backward(l, params)?;
        tape.scalar_value(l)
    }

    fn upper_grad(
        &mut self,
        theta: &mut ParamStore<S>,
        vartheta: Option<&ParamStore<S>>,
        lambda: S,
        rng_cu: &mut RngStream,
        rng_ft: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<UpperEval<S>> {
        let batch = self.sample_upper(rng_cu, rng_ft)?;
        let mut tape = Tape::new();
        let terms = self.record_upper(&mut tape, theta, &batch, lambda, fwd)?;
        tape.backward(terms.objective, theta)?;
        // The diagnostic pass reuses the teacher outputs' batch but recomputes
        // them; only the vartheta call is counted, as diagnostic.
        let l_ft_vartheta = match vartheta {
            Some(v) => {
                let mut scratch = FwdCounts::default();
                let val = self.ft_value(v, &batch.ft, &mut scratch, Role::Diagnostic)?;
                fwd.diagnostic += scratch.diagnostic + scratch.teacher;
                Some(val)
            }
            None => None,
        };
        Ok(UpperEval {
            l_cu: tape.scalar_value(terms.l_cu)?,
            l_ft_theta: tape.scalar_value(terms.l_ft)?,
            l_ft_vartheta,
        })
    }

    fn cu_grad(
        &mut self,
        theta: &mut ParamStore<S>,
        rng_cu: &mut RngStream,
        fwd: &mut FwdCounts,
    ) -> Result<S> {
        self.unlearn.validate(self.model.config().concept_count)?;
        let batch = self.sample_cu(rng_cu)?;
        let mut tape = Tape::new();
        let l = self.record_cu(&mut tape, theta, &batch, fwd)?;
        tape.backward(l, theta)?;
        tape.scalar_value(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(q: [f64; 4], a: [f64; 2], b: [f64; 2]) -> QuadraticProblem<f64> {
        QuadraticProblem::new(
            a.to_vec(),
            Tensor::new(vec![2, 2], q.to_vec()).unwrap(),
            b.to_vec(),
        )
        .unwrap()
    }

    fn cfg(e: usize, k: usize, lambda: f64, eta: f64, zeta: f64) -> BilevelConfig {
        BilevelConfig {
            e,
            k,
            lambda,
            eta,
            zeta,
            ..BilevelConfig::default()
        }
    }

    #[test]
    fn lower_step_on_half_norm() {
        let mut p = quad([1.0, 0.0, 0.0, 1.0], [0.0, 0.0], [0.0, 0.0]);
        let c = cfg(1, 1, 0.0, 0.1, 0.0);
        let mut st = BilevelState::new(&p.store(vec![2.0, 0.0]), &c, &RngStream::root(0));
        lower_step(&mut st, &mut p, &c).unwrap();
        assert_eq!(st.vartheta.value(QUAD_PARAM).unwrap().data(), &[1.8, 0.0]);
        assert_eq!(st.theta.value(QUAD_PARAM).unwrap().data(), &[2.0, 0.0]);

        let c0 = cfg(1, 1, 0.0, 0.0, 0.0);
        let mut st = BilevelState::new(&p.store(vec![2.0, 0.0]), &c0, &RngStream::root(0));
        lower_step(&mut st, &mut p, &c0).unwrap();
        assert_eq!(st.vartheta.value(QUAD_PARAM).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn lower_steps_descend_monotonically() {
        let mut p = quad([2.0, 0.5, 0.5, 1.0], [0.0, 0.0], [1.0, -1.0]);
        let c = cfg(1, 30, 1.0, 0.3, 0.0);
        let st = run_bilevel(&p.store(vec![3.0, 3.0]), &mut p, &c, &RngStream::root(0)).unwrap();
        let losses: Vec<f64> = st
            .history
            .iter()
            .filter(|r| r.step_kind == StepKind::Lower)
            .map(|r| r.l_ft_vartheta.unwrap())
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn theta_update_ignores_vartheta() {
        let p = quad([1.0, 0.0, 0.0, 0.0], [3.0, 4.0], [0.0, 0.0]);
        let c = cfg(1, 1, 10.0, 0.1, 0.01);
        let run = |vt: Vec<f64>| {
            let mut p = p.clone();
            let mut st = BilevelState::new(&p.store(vec![1.0, 1.0]), &c, &RngStream::root(0));
            st.vartheta = p.store(vt);
            upper_step(&mut st, &mut p, &c).unwrap();
            (st.theta, st.history[0].gap)
        };
        let (a, ga) = run(vec![0.0, 0.0]);
        let (b, gb) = run(vec![5.0, -7.0]);
        assert!(a.values_bitwise_eq(&b));
        assert_ne!(ga, gb);
    }

    #[test]
    fn degenerate_loop_is_one_lower_step() {
        let mut p = quad([1.0, 0.0, 0.0, 1.0], [3.0, 4.0], [0.0, 0.0]);
        let c = cfg(1, 1, 0.0, 0.1, 0.0);
        let st = run_bilevel(&p.store(vec![2.0, 0.0]), &mut p, &c, &RngStream::root(0)).unwrap();
        assert_eq!(st.theta.value(QUAD_PARAM).unwrap().data(), &[2.0, 0.0]);
        assert_eq!(st.vartheta.value(QUAD_PARAM).unwrap().data(), &[1.8, 0.0]);
        assert_eq!(c.total_iterations(), 2);
        assert_eq!(st.history.len(), 2);
    }

    #[test]
    fn resync_policy_copies_theta() {
        let mut p = quad([1.0, 0.0, 0.0, 0.0], [3.0, 4.0], [0.0, 0.0]);
        let c = BilevelConfig {
            vartheta_policy: VarthetaPolicy::ResyncAfterUpper,
            ..cfg(3, 2, 5.0, 0.1, 0.05)
        };
        let st = run_bilevel(&p.store(vec![1.0, 1.0]), &mut p, &c, &RngStream::root(0)).unwrap();
        assert!(st.theta.values_bitwise_eq(&st.vartheta));
    }

    #[test]
    fn reference_trivial_and_diagonal_cases() {
        let r = quad_bilevel_reference(&[3.0, 4.0], &[0.0; 4], &[0.0, 0.0], &[1.0, 100.0]).unwrap();
        assert_eq!(r.bilevel, vec![3.0, 4.0]);
        for row in &r.rows {
            assert_eq!(row.penalized, vec![3.0, 4.0]);
        }
        let grid = [1.0, 10.0, 100.0, 1000.0];
        let r =
            quad_bilevel_reference(&[3.0, 4.0], &[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0], &grid).unwrap();
        assert!((r.bilevel[0]).abs() < 1e-12 && (r.bilevel[1] - 4.0).abs() < 1e-12);
        for row in &r.rows {
            assert!((row.distance - 3.0 / (1.0 + row.lambda)).abs() < 1e-9);
        }
        assert!(r.rows.windows(2).all(|w| w[1].distance <= w[0].distance));
    }

    #[test]
    fn reference_rejects_inconsistent_b() {
        assert!(
            quad_bilevel_reference(&[3.0, 4.0], &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0], &[1.0])
                .is_err()
        );
    }

    #[test]
    fn two_stage_without_unlearning_is_fine_tuning() {
        let mut p = quad([1.0, 0.0, 0.0, 1.0], [3.0, 4.0], [1.0, 1.0]);
        let ts = TwoStageConfig {
            n: 5,
            m: 0,
            ft_lr: 0.1,
            cu_lr: 0.1,
            optimizer: OptimizerKind::Sgd,
        };
        let out =
            run_two_stage(&p.store(vec![0.0, 0.0]), &mut p, &ts, &RngStream::root(0)).unwrap();
        let expect = 1.0 - 0.9f64.powi(5);
        for v in out.theta.value(QUAD_PARAM).unwrap().data() {
            assert!((v - expect).abs() < 1e-12);
        }
        assert_eq!(out.total_iterations, 5);
    }

    #[test]
    fn history_csv_header() {
        let mut p = quad([1.0, 0.0, 0.0, 1.0], [3.0, 4.0], [0.0, 0.0]);
        let st = run_bilevel(
            &p.store(vec![0.0, 0.0]),
            &mut p,
            &cfg(1, 1, 1.0, 0.1, 0.1),
            &RngStream::root(0),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &st.history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "step_kind,e,k,L_cu,L_ft_theta,L_ft_vartheta,gap,fwd_teacher,fwd_theta,fwd_vartheta\n"
        ));
        assert!(text.lines().nth(1).unwrap().starts_with("lower,0,0,,,"));
    }
}
