//! The train → prune → fine-tune / unlearn → eval stages as plain functions.
//! Every stage derives its randomness from `(seed, stage name)`, so a stage
//! rerun with the same config and inputs reproduces its outputs bitwise.

use anyhow::Context as _;
use bilevel_core::bilevel::{
    run_bilevel_observed, run_two_stage_observed, BilevelProblem, DiffusionProblem, FwdCounts,
    Role, StepRecord,
};
use bilevel_core::data::{gen_dataset, LabeledSet, MixtureSpec};
use bilevel_core::denoiser::{Denoiser, InitMode};
use bilevel_core::diffusion::NoiseSchedule;
use bilevel_core::eval::{evaluate, heldout_loss, heldout_set, sample_data_space, EvalReport};
use bilevel_core::objectives::{Frozen, FtWeights};
use bilevel_core::optim::{Optimizer, OptimizerKind};
use bilevel_core::params::ParamStore;
use bilevel_core::pruning::{apply_mask, MagnitudePrune, PruneMask, PruneReport, PruneStrategy};
use bilevel_core::rng::RngStream;
use bilevel_core::tensor::Tensor;
use bilevel_core::Error;
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Everything derived from a config that the stages share.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub spec: MixtureSpec,
    pub sched: NoiseSchedule<f64>,
    pub model: Denoiser<f64>,
    pub root: RngStream,
    pub train: LabeledSet<f64>,
    pub heldout: LabeledSet<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub iter: usize,
    pub train_loss: Option<f64>,
    pub heldout_loss: f64,
}

/// A training run that stopped on a non-finite gradient. `last_good` holds
/// the parameters from before the failing step.
#[derive(Debug)]
pub struct Diverged {
    pub last_good: ParamStore<f64>,
    pub steps: usize,
    pub source: Error,
}

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training diverged after {} good steps: {}",
            self.steps, self.source
        )
    }
}

impl std::error::Error for Diverged {}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let spec = cfg.mixture.spec();
        let sched = cfg.schedule.build()?;
        let model = Denoiser::new(cfg.denoiser.clone())?;
        let root = RngStream::root(cfg.seed);
        let scale = 1.0 / spec.data_std();
        let train = gen_dataset::<f64>(
            &spec,
            cfg.base.n_per_concept.max(cfg.ft.n_per_concept),
            &mut root.derive("data"),
        )?
        .scaled(scale);
        let heldout = heldout_set(&spec, cfg.eval.heldout_n, &root.derive("eval"))?;
        Ok(Self {
            cfg,
            spec,
            sched,
            model,
            root,
            train,
            heldout,
        })
    }

    pub fn digest(&self) -> String {
        self.cfg.digest()
    }

    pub fn heldout_loss(&self, store: &ParamStore<f64>) -> anyhow::Result<f64> {
        Ok(heldout_loss(
            &self.model,
            store,
            &self.heldout,
            &self.sched,
            &self.root.derive("eval"),
        )?)
    }

    fn take(&self, n_per_concept: usize) -> LabeledSet<f64> {
        // Rows are concept-major with `per` rows per concept.
        let per = self.cfg.base.n_per_concept.max(self.cfg.ft.n_per_concept);
        let idx: Vec<usize> = (0..self.train.len())
            .filter(|i| i % per < n_per_concept)
            .collect();
        self.train.select(&idx)
    }

    pub fn base_data(&self) -> LabeledSet<f64> {
        self.take(self.cfg.base.n_per_concept)
    }

    /// Fine-tuning data; the unlearning target is left out when `exclude_target`.
    pub fn ft_data(&self, exclude_target: bool) -> LabeledSet<f64> {
        let target = self.cfg.unlearn.target;
        let d = self.take(self.cfg.ft.n_per_concept);
        if exclude_target {
            d.filter(|c| c != target)
        } else {
            d
        }
    }

    pub fn cu_data(&self) -> Tensor<f64> {
        let target = self.cfg.unlearn.target;
        self.take(self.cfg.ft.n_per_concept)
            .filter(|c| c == target)
            .x
    }

    pub fn problem<'a>(
        &'a self,
        teacher: Option<&'a ParamStore<f64>>,
        ft_data: &'a LabeledSet<f64>,
        cu_data: &'a Tensor<f64>,
        weights: FtWeights,
        batch_size: usize,
        null_prob: f64,
    ) -> DiffusionProblem<'a, f64> {
        DiffusionProblem {
            model: &self.model,
            teacher: teacher.map(|t| Frozen::new(&self.model, t)),
            sched: &self.sched,
            ft_data,
            cu_data,
            weights,
            unlearn: self.cfg.unlearn,
            batch_size,
            null_prob,
        }
    }

    /// `iters` fine-tuning steps on `store`, held-out loss every `log_every`
    /// steps (and at step 0).
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        &self,
        problem: &mut DiffusionProblem<'_, f64>,
        store: &mut ParamStore<f64>,
        optimizer: OptimizerKind,
        lr: impl Fn(usize) -> f64,
        iters: usize,
        log_every: usize,
        rng: &RngStream,
    ) -> anyhow::Result<Vec<CurveRow>> {
        let mut rng = rng.clone();
        let mut opt = Optimizer::new(optimizer);
        let mut fwd = FwdCounts::default();
        let mut curve = vec![CurveRow {
            iter: 0,
            train_loss: None,
            heldout_loss: self.heldout_loss(store)?,
        }];
        for i in 1..=iters {
            store.zero_grad();
            let loss = problem.ft_grad(store, Role::Theta, &mut rng, &mut fwd);
            let loss = match loss {
                Ok(l) if store.grads_finite() => l,
                Ok(_) => {
                    return Err(Diverged {
                        last_good: store.clone(),
                        steps: i - 1,
                        source: Error::NonFiniteGradient {
                            stage: "fit",
                            step: i,
                        },
                    }
                    .into())
                }
                Err(e) => {
                    return Err(Diverged {
                        last_good: store.clone(),
                        steps: i - 1,
                        source: e,
                    }
                    .into())
                }
            };
            opt.step(store, lr(i - 1));
            if log_every > 0 && i % log_every == 0 {
                curve.push(CurveRow {
                    iter: i,
                    train_loss: Some(loss),
                    heldout_loss: self.heldout_loss(store)?,
                });
            }
        }
        Ok(curve)
    }

    /// Teacher training on every concept with null-concept dropout.
    pub fn train_base(&self) -> anyhow::Result<(ParamStore<f64>, Vec<CurveRow>)> {
        let b = &self.cfg.base;
        let mut store = self.model.init(&mut self.root.derive("init/teacher"));
        let data = self.base_data();
        let empty = Tensor::zeros(&[0, self.spec.dim()]);
        let mut problem = self.problem(
            None,
            &data,
            &empty,
            FtWeights::without_distill(),
            b.batch_size,
            b.null_prob,
        );
        let curve = self.fit(
            &mut problem,
            &mut store,
            b.optimizer,
            |i| b.lr_at(i),
            b.iters,
            b.log_every,
            &self.root.derive("train-base"),
        )?;
        Ok((store, curve))
    }

    pub fn prune(
        &self,
        teacher: &ParamStore<f64>,
    ) -> anyhow::Result<(ParamStore<f64>, PruneMask, PruneReport)> {
        let p = &self.cfg.prune;
        let strategy = MagnitudePrune {
            scope: p.scope,
            exempt_biases: p.exempt_biases,
            exempt_embeddings: p.exempt_embeddings,
        };
        let (mask, report) = strategy.prune(teacher, p.keep)?;
        let mut pruned = teacher.detached_copy();
        apply_mask(&mut pruned, &mask)?;
        Ok((pruned, mask, report))
    }

    /// Fine-tunes a pruned student, optionally from a random init that
    /// carries the same mask.
    pub fn finetune(
        &self,
        pruned: &ParamStore<f64>,
        teacher: &ParamStore<f64>,
        distill: bool,
        init: InitMode,
    ) -> anyhow::Result<(ParamStore<f64>, Vec<CurveRow>)> {
        let f = &self.cfg.ft;
        let mut store = match init {
            InitMode::PrunedFromTeacher => pruned.clone(),
            InitMode::Random => {
                let mut s = self.model.init_student(
                    InitMode::Random,
                    teacher,
                    &mut self.root.derive("init/student"),
                )?;
                if let Some(mask) = mask_of(pruned) {
                    apply_mask(&mut s, &mask)?;
                }
                s
            }
        };
        let weights = if distill {
            f.weights
        } else {
            FtWeights::without_distill()
        };
        let data = self.ft_data(false);
        let empty = Tensor::zeros(&[0, self.spec.dim()]);
        let mut problem = self.problem(
            Some(teacher),
            &data,
            &empty,
            weights,
            f.batch_size,
            f.null_prob,
        );
        let curve = self.fit(
            &mut problem,
            &mut store,
            f.optimizer,
            |_| f.lr,
            f.iters,
            f.log_every,
            &self.root.derive("finetune"),
        )?;
        Ok((store, curve))
    }

    pub fn unlearn(
        &self,
        pruned: &ParamStore<f64>,
        teacher: &ParamStore<f64>,
        method: Method,
        mut observe: impl FnMut(&StepRecord, &ParamStore<f64>) -> anyhow::Result<()>,
    ) -> anyhow::Result<UnlearnOutput> {
        let f = &self.cfg.ft;
        let data = self.ft_data(f.exclude_target);
        let cu = self.cu_data();
        let mut problem = self.problem(
            Some(teacher),
            &data,
            &cu,
            f.weights,
            f.batch_size,
            f.null_prob,
        );
        let rng = self.root.derive("unlearn");
        let mut err = None;
        let mut obs = |r: &StepRecord, p: &ParamStore<f64>| -> bilevel_core::Result<()> {
            observe(r, p).map_err(|e| {
                err = Some(e);
                Error::InvalidArgument("observer failed".into())
            })
        };
        let out = match method {
            Method::Bilevel => {
                let cfg = &self.cfg.bilevel;
                run_bilevel_observed(pruned, &mut problem, cfg, &rng, &mut obs).map(|st| {
                    UnlearnOutput {
                        theta: st.theta,
                        history: st.history,
                        fwd: st.fwd,
                        total_iterations: cfg.total_iterations(),
                    }
                })
            }
            Method::TwoStage => {
                run_two_stage_observed(pruned, &mut problem, &self.cfg.two_stage(), &rng, &mut obs)
                    .map(|o| UnlearnOutput {
                        theta: o.theta,
                        history: o.history,
                        fwd: o.fwd,
                        total_iterations: o.total_iterations,
                    })
            }
        };
        match (out, err) {
            (_, Some(e)) => Err(e),
            (r, None) => Ok(r?),
        }
    }

    pub fn evaluate(&self, store: &ParamStore<f64>) -> anyhow::Result<EvalReport> {
        let mut r = evaluate(
            &self.model,
            store,
            &self.spec,
            self.cfg.unlearn.target,
            &self.sched,
            &self.cfg.eval,
            &self.root.derive("eval"),
        )?;
        r.config_digest = self.digest();
        Ok(r)
    }

    /// `n` samples for `concept` in data space.
    pub fn sample(
        &self,
        store: &ParamStore<f64>,
        concept: usize,
        n: usize,
    ) -> anyhow::Result<Tensor<f64>> {
        sample_data_space(
            &self.model,
            store,
            &self.spec,
            concept,
            n,
            &self.sched,
            self.cfg.eval.guidance,
            &self.root.derive("sample"),
        )
        .with_context(|| format!("sampling concept {concept}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Bilevel,
    TwoStage,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Bilevel => "bilevel",
            Method::TwoStage => "two-stage",
        }
    }
}

pub struct UnlearnOutput {
    pub theta: ParamStore<f64>,
    pub history: Vec<StepRecord>,
    pub fwd: FwdCounts,
    pub total_iterations: usize,
}

pub fn mask_of(store: &ParamStore<f64>) -> Option<PruneMask> {
    let mut entries = std::collections::BTreeMap::new();
    for (name, p) in store.iter() {
        entries.insert(name.to_string(), p.mask()?.to_vec());
    }
    Some(PruneMask::from_entries(entries))
}

pub fn write_curve_csv(path: &std::path::Path, curve: &[CurveRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
