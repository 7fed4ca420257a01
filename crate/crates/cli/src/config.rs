//! Experiment configuration. Every field has a default, so an empty file is a
//! valid config; the resolved form is written next to every run's outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bilevel_core::bilevel::{BilevelConfig, TwoStageConfig};
use bilevel_core::data::MixtureSpec;
use bilevel_core::denoiser::DenoiserConfig;
use bilevel_core::diffusion::ScheduleSpec;
use bilevel_core::eval::EvalOptions;
use bilevel_core::objectives::{FtWeights, UnlearnSpec};
use bilevel_core::optim::OptimizerKind;
use bilevel_core::pruning::PruneScope;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    /// Real concepts; the null concept is added on top.
    pub components: usize,
    pub radius: f64,
    pub variance: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            components: 8,
            radius: 5.0,
            variance: 0.15,
        }
    }
}

impl MixtureConfig {
    pub fn spec(&self) -> MixtureSpec {
        MixtureSpec::circle(self.components, self.radius, self.variance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub iters: usize,
    /// Peak learning rate, decayed along a half cosine to `lr * lr_final_ratio`.
    pub lr: f64,
    pub lr_final_ratio: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Probability of training a row as the null concept.
    pub null_prob: f64,
    pub n_per_concept: usize,
    pub log_every: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            iters: 20000,
            lr: 2e-3,
            lr_final_ratio: 0.005,
            batch_size: 256,
            optimizer: OptimizerKind::adam(),
            null_prob: 0.1,
            n_per_concept: 2000,
            log_every: 500,
        }
    }
}

impl BaseConfig {
    /// Learning rate for step `i` (0-based).
    pub fn lr_at(&self, i: usize) -> f64 {
        let progress = i as f64 / self.iters.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.lr_final_ratio + (1.0 - self.lr_final_ratio) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub strategy: String,
    /// Kept fraction of prunable entries.
    pub keep: f64,
    pub scope: PruneScope,
    pub exempt_biases: bool,
    pub exempt_embeddings: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            strategy: "magnitude".into(),
            keep: 0.8,
            scope: PruneScope::Global,
            exempt_biases: true,
            exempt_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weights: FtWeights,
    pub null_prob: f64,
    /// Fine-tuning rows per concept: a subset of the teacher's data, smaller
    /// than what the teacher saw.
    pub n_per_concept: usize,
    pub log_every: usize,
    /// Leave the unlearning target out of the fine-tuning data.
    pub exclude_target: bool,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            iters: 5000,
            lr: 1e-3,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            weights: FtWeights::default(),
            null_prob: 0.0,
            n_per_concept: 250,
            log_every: 500,
            exclude_target: true,
        }
    }
}

/// Stage-2 defaults are the published ESD settings: 1000 iterations at 1e-5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageSection {
    /// Fine-tuning iterations; the bilevel budget `E·K + E` minus `m` when absent.
    pub n: Option<usize>,
    /// Unlearning iterations.
    pub m: usize,
    /// Unlearning learning rate.
    pub lr: f64,
}

impl Default for TwoStageSection {
    fn default() -> Self {
        Self {
            n: None,
            m: 1000,
            lr: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub mixture: MixtureConfig,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub base: BaseConfig,
    pub prune: PruneConfig,
    pub ft: FtConfig,
    pub unlearn: UnlearnSpec,
    pub bilevel: BilevelConfig,
    pub two_stage: TwoStageSection,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            mixture: MixtureConfig::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig::default(),
            base: BaseConfig::default(),
            prune: PruneConfig::default(),
            ft: FtConfig::default(),
            unlearn: UnlearnSpec::negative_guidance(1),
            bilevel: BilevelConfig::default(),
            two_stage: TwoStageSection::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let spec = self.mixture.spec();
        spec.validate()?;
        self.denoiser.validate()?;
        if self.denoiser.concept_count != spec.concept_count() {
            bail!(
                "denoiser.concept_count is {} but the mixture has {} concepts (null included)",
                self.denoiser.concept_count,
                spec.concept_count()
            );
        }
        if self.denoiser.input_dim != spec.dim() {
            bail!(
                "denoiser.input_dim must equal the data dimension {}",
                spec.dim()
            );
        }
        self.schedule.build::<f64>()?;
        self.ft.weights.validate()?;
        self.unlearn.validate(spec.concept_count())?;
        self.bilevel.validate()?;
        if !(0.0..=1.0).contains(&self.prune.keep) {
            bail!("prune.keep must lie in [0, 1]");
        }
        if self.prune.strategy != "magnitude" {
            bail!(
                "unknown prune strategy {:?}; only \"magnitude\" is available",
                self.prune.strategy
            );
        }
        if self.two_stage.n.is_none() && self.two_stage.m > self.bilevel.total_iterations() {
            bail!(
                "two_stage.m = {} exceeds the bilevel budget {}",
                self.two_stage.m,
                self.bilevel.total_iterations()
            );
        }
        if self.eval.n < 2 {
            bail!("eval.n must be at least 2");
        }
        Ok(())
    }

    /// Stage 1 uses the lower-level learning rate and optimizer; stage 2 the
    /// section's own settings. Together they spend the bilevel budget.
    pub fn two_stage(&self) -> TwoStageConfig {
        let total = self.bilevel.total_iterations();
        TwoStageConfig {
            n: self
                .two_stage
                .n
                .unwrap_or(total.saturating_sub(self.two_stage.m)),
            m: self.two_stage.m,
            ft_lr: self.bilevel.eta,
            cu_lr: self.two_stage.lr,
            optimizer: self.bilevel.optimizer,
        }
    }

    /// The config with every default written out.
    pub fn resolved_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the resolved config, excluding the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let text = toml::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
