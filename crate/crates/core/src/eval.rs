//! Measurement against the known mixture: how far target-conditioned samples
//! are from the erased component, how close every other concept stays to its
//! own component, and held-out denoising loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bilevel::FwdCounts;
use crate::data::LabeledSet;
pub use crate::data::{gen_dataset, MixtureSpec};
use crate::denoiser::{Denoiser, NULL_CONCEPT};
use crate::diffusion::{ancestral_sample, diffusion_loss, DiffusionBatch, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn row_dist<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            total += row_dist(ra, b.row(j));
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// `2 E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` with every expectation replaced by
/// the mean over all ordered pairs (diagonal included).
pub fn energy_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(invalid(
            "energy distance needs at least two samples per set",
        ));
    }
    if a.row_len() != b.row_len() {
        return Err(invalid("sample sets have different dimensions"));
    }
    let v = 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
    // The V-statistic is non-negative; clamp rounding below zero.
    Ok(v.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Model samples per concept.
    pub n: usize,
    /// Fixed held-out rows for the denoising loss.
    pub heldout_n: usize,
    /// Classifier-free guidance scale used when sampling.
    #[serde(default)]
    pub guidance: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n: 500,
            heldout_n: 2000,
            guidance: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: usize,
    pub removal_energy: f64,
    /// Every non-null concept except the target.
    pub retention_energy: BTreeMap<usize, f64>,
    pub heldout_ft_loss: f64,
    pub fwd_counts: Option<FwdCounts>,
    pub seed: u64,
    pub config_digest: String,
    pub mixture_digest: String,
}

impl EvalReport {
    pub fn mean_retention(&self) -> f64 {
        if self.retention_energy.is_empty() {
            return 0.0;
        }
        self.retention_energy.values().sum::<f64>() / self.retention_energy.len() as f64
    }

    /// One summary CSV row.
    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let fwd = self.fwd_counts.unwrap_or_default();
        out.write_record([
            "target",
            "removal_energy",
            "mean_retention_energy",
            "heldout_ft_loss",
            "fwd_teacher",
            "fwd_theta",
            "fwd_vartheta",
            "seed",
            "config_digest",
        ])
        .map_err(csv_err)?;
        out.write_record([
            self.target.to_string(),
            fmt_f(self.removal_energy),
            fmt_f(self.mean_retention()),
            fmt_f(self.heldout_ft_loss),
            fwd.teacher.to_string(),
            fwd.theta.to_string(),
            fwd.vartheta.to_string(),
            self.seed.to_string(),
            self.config_digest.clone(),
        ])
        .map_err(csv_err)?;
        out.flush().map_err(|e| invalid(e.to_string()))
    }

    /// One row per concept with its role (`removal` or `retention`).
    pub fn write_concepts_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["concept", "role", "energy"])
            .map_err(csv_err)?;
        let mut rows = vec![(self.target, "removal", self.removal_energy)];
        rows.extend(
            self.retention_energy
                .iter()
                .map(|(&c, &v)| (c, "retention", v)),
        );
        rows.sort_by_key(|r| r.0);
        for (c, role, v) in rows {
            out.write_record([c.to_string(), role.to_string(), fmt_f(v)])
                .map_err(csv_err)?;
        }
        out.flush().map_err(|e| invalid(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    invalid(format!("csv: {e}"))
}

/// Shortest round-trip decimal form.
pub fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

/// Held-out rows from a reserved stream, scaled into model space.
pub fn heldout_set<S: Scalar>(
    spec: &MixtureSpec,
    n: usize,
    rng: &RngStream,
) -> Result<LabeledSet<S>> {
    let raw = spec.sample_marginal::<S>(n, &mut rng.derive("heldout"))?;
    Ok(raw.scaled(S::lit(1.0 / spec.data_std())))
}

/// Mean denoising loss over `set`, with timesteps and noise from a fixed
/// stream so every model sees the same draws.
pub fn heldout_loss<S: Scalar>(
    model: &Denoiser<S>,
    store: &ParamStore<S>,
    set: &LabeledSet<S>,
    sched: &NoiseSchedule<S>,
    rng: &RngStream,
) -> Result<f64> {
    let batch = DiffusionBatch::sample(
        set.x.clone(),
        set.c.clone(),
        sched,
        &mut rng.derive("heldout-noise"),
    )?;
    let mut tape = Tape::new();
    let l = diffusion_loss(&mut tape, model, store, &batch, sched)?;
    Ok(tape.scalar_value(l)?.as_f64())
}

/// Samples `n` points for `concept` and maps them back to data space.
pub fn sample_data_space<S: Scalar>(
    model: &Denoiser<S>,
    store: &ParamStore<S>,
    spec: &MixtureSpec,
    concept: usize,
    n: usize,
    sched: &NoiseSchedule<S>,
    guidance: f64,
    rng: &RngStream,
) -> Result<Tensor<S>> {
    let mut r = rng.derive(&format!("sample-{concept}"));
    let x = ancestral_sample(model, store, concept, n, sched, S::lit(guidance), &mut r)?;
    let k = S::lit(spec.data_std());
    Ok(x.map(|v| v * k))
}

/// Full report for one model. Every number depends only on the parameters,
/// the mixture, the options and `rng`'s seed and path.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<S: Scalar>(
    model: &Denoiser<S>,
    store: &ParamStore<S>,
    spec: &MixtureSpec,
    target: usize,
    sched: &NoiseSchedule<S>,
    opts: &EvalOptions,
    rng: &RngStream,
) -> Result<EvalReport> {
    spec.validate()?;
    if opts.n < 2 {
        return Err(invalid("need at least two samples per concept"));
    }
    spec.component(target)?;
    let mut removal = 0.0;
    let mut retention = BTreeMap::new();
    for concept in 1..spec.concept_count() {
        let samples = sample_data_space(
            model,
            store,
            spec,
            concept,
            opts.n,
            sched,
            opts.guidance,
            rng,
        )?;
        let reference = spec.sample_concept::<S>(
            concept,
            opts.n,
            &mut rng.derive(&format!("reference-{concept}")),
        )?;
        let e = energy_distance(&samples, &reference)?;
        if concept == target {
            removal = e;
        } else {
            retention.insert(concept, e);
        }
    }
    let held = heldout_set::<S>(spec, opts.heldout_n, rng)?;
    Ok(EvalReport {
        target,
        removal_energy: removal,
        retention_energy: retention,
        heldout_ft_loss: heldout_loss(model, store, &held, sched, rng)?,
        fwd_counts: None,
        seed: rng.seed(),
        config_digest: String::new(),
        mixture_digest: spec.digest(),
    })
}

/// Monte-Carlo energy distance between the mixture marginal and the
/// component of `target`: what a model scores if target conditioning
/// collapses to the unconditional distribution.
pub fn marginal_removal_reference(
    spec: &MixtureSpec,
    target: usize,
    n: usize,
    rng: &RngStream,
) -> Result<f64> {
    let marginal = spec.sample_marginal::<f64>(n, &mut rng.derive("marginal"))?;
    let comp = spec.sample_concept::<f64>(target, n, &mut rng.derive("component"))?;
    energy_distance(&marginal.x, &comp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub label: String,
    pub removal_energy: f64,
    pub mean_retention_energy: f64,
    /// Labels of runs this one Pareto-dominates (higher removal, lower
    /// retention distance, strictly better on at least one).
    pub dominates: Vec<String>,
}

pub fn dominates(a: &EvalReport, b: &EvalReport) -> bool {
    let (ra, rb) = (a.removal_energy, b.removal_energy);
    let (ta, tb) = (a.mean_retention(), b.mean_retention());
    ra >= rb && ta <= tb && (ra > rb || ta < tb)
}

/// Sorted by removal (descending) then mean retention (ascending).
pub fn compare_runs(reports: &[(String, EvalReport)]) -> Result<Vec<RankRow>> {
    if let Some((_, first)) = reports.first() {
        for (label, r) in reports {
            if r.mixture_digest != first.mixture_digest || r.target != first.target {
                return Err(invalid(format!(
                    "report {label} uses a different mixture or target"
                )));
            }
        }
    }
    let mut rows: Vec<RankRow> = reports
        .iter()
        .map(|(label, r)| RankRow {
            label: label.clone(),
            removal_energy: r.removal_energy,
            mean_retention_energy: r.mean_retention(),
            dominates: reports
                .iter()
                .filter(|(l, o)| l != label && dominates(r, o))
                .map(|(l, _)| l.clone())
                .collect(),
        })
        .collect();
    rows.sort_by(|a, b| {
        b.removal_energy
            .total_cmp(&a.removal_energy)
            .then(a.mean_retention_energy.total_cmp(&b.mean_retention_energy))
    });
    Ok(rows)
}

pub fn write_ranking_csv<W: std::io::Write>(w: W, rows: &[RankRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "label",
        "removal_energy",
        "mean_retention_energy",
        "dominates",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.label.clone(),
            fmt_f(r.removal_energy),
            fmt_f(r.mean_retention_energy),
            r.dominates.join(";"),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| invalid(e.to_string()))
}

/// Concepts scored for retention when `target` is removed.
pub fn retained_concepts(spec: &MixtureSpec, target: usize) -> Vec<usize> {
    (1..spec.concept_count())
        .filter(|&c| c != target && c != NULL_CONCEPT)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_sets_score_zero() {
        let a = pts(&[[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]]);
        let b = pts(&[[3.0, -1.0], [0.0, 0.0], [1.0, 2.0]]);
        assert!(energy_distance(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn point_masses() {
        let a = pts(&[[0.0, 0.0], [0.0, 0.0]]);
        let b = pts(&[[3.0, 4.0], [3.0, 4.0]]);
        assert!((energy_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn undersized_sets_rejected() {
        let a = pts(&[[0.0, 0.0]]);
        let b = pts(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(energy_distance(&a, &b).is_err());
    }

    fn report(label_removal: f64, retention: f64) -> EvalReport {
        EvalReport {
            target: 1,
            removal_energy: label_removal,
            retention_energy: [(2, retention)].into_iter().collect(),
            heldout_ft_loss: 0.0,
            fwd_counts: None,
            seed: 0,
            config_digest: String::new(),
            mixture_digest: "m".into(),
        }
    }

    #[test]
    fn ranking_and_dominance() {
        let single = compare_runs(&[("a".into(), report(1.0, 1.0))]).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].dominates.is_empty());

        let rows = compare_runs(&[
            ("weak".into(), report(1.0, 2.0)),
            ("strong".into(), report(2.0, 1.0)),
        ])
        .unwrap();
        assert_eq!(rows[0].label, "strong");
        assert_eq!(rows[0].dominates, vec!["weak".to_string()]);
        assert!(rows[1].dominates.is_empty());

        let mut other = report(1.0, 1.0);
        other.mixture_digest = "x".into();
        assert!(compare_runs(&[("a".into(), report(1.0, 1.0)), ("b".into(), other)]).is_err());
    }
}
