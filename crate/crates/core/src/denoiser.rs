//! Conditional noise predictor `ε(x_t, t, c)`: an MLP whose every hidden
//! block sees the sinusoidal time embedding and a learned concept embedding.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reserved concept id for the unconditional prediction.
pub const NULL_CONCEPT: usize = 0;

const CONCEPT_EMBED: &str = "concept_embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    /// Includes the null concept at id 0.
    pub concept_count: usize,
    pub concept_embed_dim: usize,
    /// 0-based hidden-layer indices whose activations are recorded.
    pub feature_taps: Vec<usize>,
    #[serde(default = "default_max_period")]
    pub time_max_period: f64,
}

fn default_max_period() -> f64 {
    1000.0
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![128, 128, 128],
            time_embed_dim: 16,
            concept_count: 9,
            concept_embed_dim: 16,
            feature_taps: vec![1, 2],
            time_max_period: default_max_period(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid(
                "denoiser needs a positive input width and at least one hidden layer",
            ));
        }
        if self.concept_count < 2 {
            return Err(invalid(
                "concept_count must include the null concept and at least one real concept",
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        if self.concept_embed_dim == 0 {
            return Err(invalid("concept_embed_dim must be positive"));
        }
        let mut prev = None;
        for &tap in &self.feature_taps {
            if tap >= self.hidden.len() {
                return Err(Error::TapMismatch {
                    index: tap,
                    reason: format!("only {} hidden layers", self.hidden.len()),
                });
            }
            if prev.is_some_and(|p| p >= tap) {
                return Err(Error::TapMismatch {
                    index: tap,
                    reason: "taps must be strictly increasing".into(),
                });
            }
            prev = Some(tap);
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        self.time_embed_dim + self.concept_embed_dim
    }
}

/// Activations recorded at the configured taps, in layer order.
#[derive(Clone, Debug)]
pub struct FeatureTrace<T> {
    pub taps: Vec<(usize, T)>,
}

impl<T> FeatureTrace<T> {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub eps: T,
    pub trace: FeatureTrace<T>,
}

/// How a student network is initialised before fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Copy the teacher's values; pruning masks them afterwards.
    PrunedFromTeacher,
    Random,
}

#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    cfg: DenoiserConfig,
    _scalar: PhantomData<S>,
}

fn hidden_weight(i: usize) -> String {
    format!("hidden.{i}.weight")
}

fn hidden_bias(i: usize) -> String {
    format!("hidden.{i}.bias")
}

/// Sinusoidal embedding recorded on `tape`: row `i` is
/// `[sin(f₀tᵢ), cos(f₀tᵢ), sin(f₁tᵢ), cos(f₁tᵢ), …]` with `f_j = P^(−j/half)`.
pub fn embed_time_on<S: Scalar>(
    tape: &mut Tape<S>,
    t: &[usize],
    dim: usize,
    max_period: f64,
) -> Result<Var> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "time embedding width must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut angles = Vec::with_capacity(t.len() * half);
    for &ti in t {
        for j in 0..half {
            let freq = (-(max_period.ln()) * j as f64 / half as f64).exp();
            angles.push(S::lit(ti as f64 * freq));
        }
    }
    let a = tape.constant(Tensor::new(vec![t.len(), half, 1], angles)?)?;
    let s = tape.sin(a)?;
    let c = tape.cos(a)?;
    let sc = tape.concat(&[s, c], 2)?;
    tape.reshape(sc, &[t.len(), dim])
}

/// Plain-tensor version of [`embed_time_on`].
pub fn embed_time<S: Scalar>(t: &[usize], dim: usize) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = embed_time_on(&mut tape, t, dim, default_max_period())?;
    Ok(tape.value(v).clone())
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            _scalar: PhantomData,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Fresh parameters: fan-in scaled normal weights, zero biases,
    /// unit-normal concept embeddings.
    pub fn init(&self, rng: &mut RngStream) -> ParamStore<S> {
        let cfg = &self.cfg;
        let mut store = ParamStore::new();
        store.insert(
            CONCEPT_EMBED,
            rng.normal_tensor(&[cfg.concept_count, cfg.concept_embed_dim]),
            ParamKind::Embedding,
        );
        let mut fan_in = cfg.input_dim;
        for (i, &width) in cfg.hidden.iter().enumerate() {
            let rows = fan_in + cfg.cond_dim();
            store.insert(
                hidden_weight(i),
                scaled_normal(rng, rows, width),
                ParamKind::Weight,
            );
            store.insert(hidden_bias(i), Tensor::zeros(&[width]), ParamKind::Bias);
            fan_in = width;
        }
        store.insert(
            "out.weight",
            scaled_normal(rng, fan_in, cfg.input_dim),
            ParamKind::Weight,
        );
        store.insert("out.bias", Tensor::zeros(&[cfg.input_dim]), ParamKind::Bias);
        store
    }

    /// Records `ε(x_t, t, c)` and the tapped activations on `tape`.
    pub fn predict(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x_t: &Tensor<S>,
        t: &[usize],
        c: &[usize],
    ) -> Result<Prediction<Var>> {
        let cfg = &self.cfg;
        let batch = x_t.rows();
        if x_t.rank() != 2 || x_t.shape()[1] != cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: x_t.shape().to_vec(),
                right: vec![batch, cfg.input_dim],
            });
        }
        if t.len() != batch || c.len() != batch {
            return Err(invalid(format!(
                "batch of {batch} rows with {} timesteps and {} concepts",
                t.len(),
                c.len()
            )));
        }
        if let Some(&bad) = c.iter().find(|&&id| id >= cfg.concept_count) {
            return Err(Error::UnknownConcept {
                id: bad,
                count: cfg.concept_count,
            });
        }

        let temb = embed_time_on(tape, t, cfg.time_embed_dim, cfg.time_max_period)?;
        let table = tape.param(store, CONCEPT_EMBED)?;
        let cemb = tape.embedding(table, c)?;
        let cond = tape.concat(&[temb, cemb], 1)?;

        let mut h = tape.constant(x_t.clone())?;
        let mut taps = Vec::with_capacity(cfg.feature_taps.len());
        for i in 0..cfg.hidden.len() {
            let inp = tape.concat(&[h, cond], 1)?;
            let w = tape.param(store, &hidden_weight(i))?;
            let b = tape.param(store, &hidden_bias(i))?;
            let z = tape.matmul(inp, w)?;
            let z = tape.add(z, b)?;
            h = tape.silu(z)?;
            if cfg.feature_taps.contains(&i) {
                taps.push((i, h));
            }
        }
        let w = tape.param(store, "out.weight")?;
        let b = tape.param(store, "out.bias")?;
        let out = tape.matmul(h, w)?;
        let eps = tape.add(out, b)?;
        Ok(Prediction {
            eps,
            trace: FeatureTrace { taps },
        })
    }

    /// Forward pass without keeping the recording: plain output tensors.
    pub fn predict_values(
        &self,
        store: &ParamStore<S>,
        x_t: &Tensor<S>,
        t: &[usize],
        c: &[usize],
    ) -> Result<Prediction<Tensor<S>>> {
        let mut tape = Tape::new();
        let p = self.predict(&mut tape, store, x_t, t, c)?;
        Ok(Prediction {
            eps: tape.value(p.eps).clone(),
            trace: FeatureTrace {
                taps: p
                    .trace
                    .taps
                    .iter()
                    .map(|&(i, v)| (i, tape.value(v).clone()))
                    .collect(),
            },
        })
    }

    /// Student parameters for fine-tuning, either copied from the teacher or
    /// freshly initialised.
    pub fn init_student(
        &self,
        mode: InitMode,
        teacher: &ParamStore<S>,
        rng: &mut RngStream,
    ) -> Result<ParamStore<S>> {
        match mode {
            InitMode::PrunedFromTeacher => {
                let fresh = self.init(&mut rng.derive("layout"));
                if !fresh.same_layout(teacher) {
                    return Err(invalid(
                        "teacher store does not match the student architecture",
                    ));
                }
                let mut out = ParamStore::new();
                for (name, p) in teacher.iter() {
                    out.insert(name, p.value().clone(), p.kind());
                }
                Ok(out)
            }
            InitMode::Random => Ok(self.init(rng)),
        }
    }
}

fn scaled_normal<S: Scalar>(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor<S> {
    let scale = S::lit(1.0 / (rows as f64).sqrt());
    rng.normal_tensor::<S>(&[rows, cols]).map(|x| x * scale)
}
