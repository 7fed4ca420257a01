//! Subcommand implementations. Each writes `config.toml` (the resolved
//! config) into its output directory before doing any work.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, ensure, Context as _};
use bilevel_core::bilevel::write_history_csv;
use bilevel_core::denoiser::InitMode;
use bilevel_core::eval::fmt_f;
use bilevel_core::params::ParamStore;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::pipeline::{write_curve_csv, Context, Diverged, Method};
use crate::tabulate::{self, TableFormat};

#[derive(Debug, Parser)]
#[command(
    name = "bilevel",
    version,
    about = "Prune, fine-tune and unlearn conditional toy diffusion models"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply to anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train the teacher on the full mixture.
    TrainBase,
    /// Magnitude-prune a teacher checkpoint.
    Prune {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Fine-tune a pruned checkpoint, with or without distillation.
    Finetune {
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Plain denoising loss only.
        #[arg(long, conflicts_with = "with_distill")]
        without_distill: bool,
        /// Default; accepted for symmetry.
        #[arg(long)]
        with_distill: bool,
        /// Start from random weights carrying the pruned mask.
        #[arg(long)]
        random_init: bool,
    },
    /// Remove the configured concept.
    Unlearn {
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Evaluate a checkpoint against the mixture.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Draw samples for one concept as `x,y,concept` rows.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        concept: usize,
        #[arg(long)]
        n: usize,
    },
    /// Gather the CSVs of finished runs into one long-format table for
    /// plotting.
    Tabulate {
        /// Run directories; each becomes a value of the `run` column.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
        format: TableFormat,
    },
    /// Run one subcommand for several seeds in parallel worker processes,
    /// each writing to `<out>/seed-<s>`.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// The subcommand and its flags, after `--`.
        #[arg(last = true, required = true)]
        args: Vec<String>,
    },
}

pub fn resolve(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn prepare(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.resolved_toml()?)?;
    Ok(())
}

fn load_params(path: &Path, ctx: &Context) -> anyhow::Result<ParamStore<f64>> {
    let ck = Checkpoint::load(path)?;
    ensure!(
        ck.denoiser == ctx.cfg.denoiser,
        "{} was saved with a different denoiser architecture",
        path.display()
    );
    Ok(ck.params)
}

fn save(ctx: &Context, params: &ParamStore<f64>, steps: u64, path: &Path) -> anyhow::Result<()> {
    Checkpoint::new(
        ctx.cfg.denoiser.clone(),
        params.clone(),
        ctx.digest(),
        steps,
    )
    .save(path)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Cmd::Sweep { seeds, jobs, args } = &cli.command {
        return sweep(&cli.common, seeds, *jobs, args);
    }
    if let Cmd::Tabulate { runs, format } = &cli.command {
        let (_, out) = resolve(&cli.common)?;
        std::fs::create_dir_all(&out)?;
        let rows = tabulate::collect(runs)?;
        let name = match format {
            TableFormat::Csv => "plot-data.csv",
            TableFormat::Gnuplot => "plot-data.dat",
        };
        tabulate::write(std::fs::File::create(out.join(name))?, &rows, *format)?;
        println!(
            "{} rows from {} runs -> {}",
            rows.len(),
            runs.len(),
            out.join(name).display()
        );
        return Ok(());
    }
    let (cfg, out) = resolve(&cli.common)?;
    prepare(&cfg, &out)?;
    let ctx = Context::new(cfg)?;
    match cli.command {
        Cmd::TrainBase => {
            let (store, curve) = match ctx.train_base() {
                Ok(v) => v,
                Err(e) => {
                    if let Some(d) = e.downcast_ref::<Diverged>() {
                        save(
                            &ctx,
                            &d.last_good,
                            d.steps as u64,
                            &out.join("teacher.last-good.ckpt"),
                        )?;
                    }
                    return Err(e);
                }
            };
            save(
                &ctx,
                &store,
                ctx.cfg.base.iters as u64,
                &out.join("teacher.ckpt"),
            )?;
            write_curve_csv(&out.join("train_base_curve.csv"), &curve)?;
            println!(
                "teacher: heldout loss {:.5}",
                curve.last().map_or(f64::NAN, |r| r.heldout_loss)
            );
        }
        Cmd::Prune { teacher } => {
            let t = load_params(&teacher, &ctx)?;
            let (pruned, _, report) = ctx.prune(&t)?;
            save(&ctx, &pruned, 0, &out.join("pruned.ckpt"))?;
            let mut w = csv::Writer::from_path(out.join("prune_report.csv"))?;
            w.write_record(["tensor", "kept_fraction", "exempt"])?;
            for (name, f) in &report.per_tensor {
                w.write_record([
                    name.clone(),
                    fmt_f(*f),
                    report.exempt.contains(name).to_string(),
                ])?;
            }
            w.write_record([
                "(prunable)".to_string(),
                fmt_f(report.kept_fraction),
                "false".into(),
            ])?;
            w.write_record([
                "(all)".to_string(),
                fmt_f(report.overall_kept_fraction),
                String::new(),
            ])?;
            w.flush()?;
            println!(
                "pruned: kept {:.4} of prunable entries (budget {}), nnz {}",
                report.kept_fraction,
                report.budget,
                pruned.nnz()
            );
        }
        Cmd::Finetune {
            pruned,
            teacher,
            without_distill,
            with_distill: _,
            random_init,
        } => {
            let p = load_params(&pruned, &ctx)?;
            let t = load_params(&teacher, &ctx)?;
            let init = if random_init {
                InitMode::Random
            } else {
                InitMode::PrunedFromTeacher
            };
            let (store, curve) = ctx.finetune(&p, &t, !without_distill, init)?;
            save(
                &ctx,
                &store,
                ctx.cfg.ft.iters as u64,
                &out.join("finetuned.ckpt"),
            )?;
            write_curve_csv(&out.join("finetune_curve.csv"), &curve)?;
            println!(
                "finetuned: heldout loss {:.5}",
                curve.last().map_or(f64::NAN, |r| r.heldout_loss)
            );
        }
        Cmd::Unlearn {
            pruned,
            teacher,
            method,
        } => {
            let p = load_params(&pruned, &ctx)?;
            let t = load_params(&teacher, &ctx)?;
            let res = ctx.unlearn(&p, &t, method, |_, _| Ok(()))?;
            let b = &ctx.cfg.bilevel;
            let ts = ctx.cfg.two_stage();
            let cycle = b.k + 1;
            ensure!(
                b.total_iterations().abs_diff(ts.total_iterations()) <= cycle,
                "budgets differ by more than one cycle: bilevel {} vs two-stage {}",
                b.total_iterations(),
                ts.total_iterations()
            );
            let tag = method.tag();
            save(
                &ctx,
                &res.theta,
                res.total_iterations as u64,
                &out.join(format!("unlearned-{tag}.ckpt")),
            )?;
            write_history_csv(
                std::fs::File::create(out.join(format!("history-{tag}.csv")))?,
                &res.history,
            )?;
            println!(
                "{tag}: {} iterations, forward calls teacher {} theta {} vartheta {} (diagnostic {})",
                res.total_iterations, res.fwd.teacher, res.fwd.theta, res.fwd.vartheta, res.fwd.diagnostic
            );
        }
        Cmd::Eval { ckpt } => {
            let p = load_params(&ckpt, &ctx)?;
            let r = ctx.evaluate(&p)?;
            r.write_summary_csv(std::fs::File::create(out.join("eval_summary.csv"))?)?;
            r.write_concepts_csv(std::fs::File::create(out.join("eval_concepts.csv"))?)?;
            println!(
                "removal {:.4}, mean retention {:.4}, heldout loss {:.5}",
                r.removal_energy,
                r.mean_retention(),
                r.heldout_ft_loss
            );
        }
        Cmd::Sample { ckpt, concept, n } => {
            let p = load_params(&ckpt, &ctx)?;
            let x = ctx.sample(&p, concept, n)?;
            let mut w = csv::Writer::from_path(out.join(format!("samples-{concept}.csv")))?;
            w.write_record(["x", "y", "concept"])?;
            for i in 0..x.rows() {
                let mut rec: Vec<String> = x.row(i).iter().map(|v| fmt_f(*v)).collect();
                rec.push(concept.to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Cmd::Sweep { .. } | Cmd::Tabulate { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn sweep(common: &Common, seeds: &[u64], jobs: usize, args: &[String]) -> anyhow::Result<()> {
    let exe = std::env::current_exe()?;
    let base = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/sweep"));
    if args.first().is_some_and(|a| a == "sweep") {
        bail!("sweeps cannot be nested");
    }
    let mut pending: Vec<u64> = seeds.iter().rev().copied().collect();
    let mut running = Vec::new();
    let mut failures = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs.max(1) {
            let Some(seed) = pending.pop() else { break };
            let mut cmd = Command::new(&exe);
            cmd.args(args).arg("--seed").arg(seed.to_string());
            cmd.arg("--out").arg(base.join(format!("seed-{seed}")));
            if let Some(c) = &common.config {
                cmd.arg("--config").arg(c);
            }
            running.push((
                seed,
                cmd.spawn()
                    .with_context(|| format!("spawning seed {seed}"))?,
            ));
        }
        let (seed, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failures.push(seed);
        }
    }
    if !failures.is_empty() {
        bail!("seeds failed: {failures:?}");
    }
    Ok(())
}
