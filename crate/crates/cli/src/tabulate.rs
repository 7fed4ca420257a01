//! Long-format export of run CSVs for plotting: one row per
//! `(run, source, x, metric, value)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use bilevel_core::eval::fmt_f;

/// Columns that label a row rather than measure something.
const LABELS: &[&str] = &[
    "step_kind",
    "role",
    "e",
    "k",
    "seed",
    "target",
    "config_digest",
    "tensor",
    "exempt",
];

/// Column used as the x coordinate when present; otherwise the row index.
const X_COLUMNS: &[&str] = &["iter", "concept"];

#[derive(Clone, Debug, PartialEq)]
pub struct LongRow {
    pub run: String,
    pub source: String,
    pub x_name: String,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TableFormat {
    /// `run,source,x_name,x,metric,value`.
    Csv,
    /// Whitespace columns, one block per series separated by two blank lines.
    Gnuplot,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn csv_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Every numeric, non-label cell of every CSV in `dirs`.
pub fn collect(dirs: &[PathBuf]) -> anyhow::Result<Vec<LongRow>> {
    let mut rows = Vec::new();
    for dir in dirs {
        let run = run_name(dir);
        for file in csv_files(dir)? {
            let source = file
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let mut reader = csv::Reader::from_path(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
            let x_col = header.iter().position(|h| X_COLUMNS.contains(&h.as_str()));
            let x_name = x_col.map_or("row".to_string(), |i| header[i].clone());
            for (r, rec) in reader.records().enumerate() {
                let rec = rec?;
                let x = match x_col {
                    Some(i) => match rec.get(i).and_then(|v| v.parse::<f64>().ok()) {
                        Some(v) => v,
                        None => continue,
                    },
                    None => r as f64,
                };
                for (i, cell) in rec.iter().enumerate() {
                    if Some(i) == x_col || LABELS.contains(&header[i].as_str()) {
                        continue;
                    }
                    if let Ok(value) = cell.parse::<f64>() {
                        rows.push(LongRow {
                            run: run.clone(),
                            source: source.clone(),
                            x_name: x_name.clone(),
                            x,
                            metric: header[i].clone(),
                            value,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write<W: Write>(mut w: W, rows: &[LongRow], format: TableFormat) -> anyhow::Result<()> {
    match format {
        TableFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["run", "source", "x_name", "x", "metric", "value"])?;
            for r in rows {
                out.write_record([
                    &r.run,
                    &r.source,
                    &r.x_name,
                    &fmt_f(r.x),
                    &r.metric,
                    &fmt_f(r.value),
                ])?;
            }
            out.flush()?;
        }
        TableFormat::Gnuplot => {
            let mut series: BTreeMap<(&str, &str, &str), Vec<&LongRow>> = BTreeMap::new();
            for r in rows {
                series
                    .entry((&r.run, &r.source, &r.metric))
                    .or_default()
                    .push(r);
            }
            for (i, ((run, source, metric), pts)) in series.iter().enumerate() {
                if i > 0 {
                    writeln!(w, "\n")?;
                }
                writeln!(w, "# index {i}: {run} {source} {metric}")?;
                writeln!(w, "# {} value", pts[0].x_name)?;
                for p in pts {
                    writeln!(w, "{} {}", fmt_f(p.x), fmt_f(p.value))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_use_iter_and_skip_labels() {
        let dir = std::env::temp_dir().join(format!("tabulate-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("finetune_curve.csv"),
            "iter,train_loss,heldout_loss\n0,,0.5\n500,0.3,0.25\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("history-bilevel.csv"),
            "step_kind,e,k,L_cu\nupper,0,0,1.5\n",
        )
        .unwrap();
        let rows = collect(std::slice::from_ref(&dir)).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        let metrics: Vec<(&str, f64, &str, f64)> = rows
            .iter()
            .map(|r| (r.x_name.as_str(), r.x, r.metric.as_str(), r.value))
            .collect();
        assert_eq!(
            metrics,
            [
                ("iter", 0.0, "heldout_loss", 0.5),
                ("iter", 500.0, "train_loss", 0.3),
                ("iter", 500.0, "heldout_loss", 0.25),
                ("row", 0.0, "L_cu", 1.5),
            ]
        );
    }

    #[test]
    fn gnuplot_blocks_are_separated_by_two_blank_lines() {
        let row = |metric: &str, x: f64| LongRow {
            run: "a".into(),
            source: "s".into(),
            x_name: "iter".into(),
            x,
            metric: metric.into(),
            value: 1.0,
        };
        let mut buf = Vec::new();
        write(
            &mut buf,
            &[row("m", 0.0), row("m", 1.0), row("n", 0.0)],
            TableFormat::Gnuplot,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches("# index").count(), 2);
        assert!(text.contains("\n\n\n# index 1: a s n\n"));
    }
}
