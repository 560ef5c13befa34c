use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunRecord};
use crate::continual::DistillRecord;

/// Mean and sample standard deviation of each metric across the order
/// seeds of one method. Failed orders are counted but not averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub ta_mean: f64,
    pub ta_std: f64,
    pub ea_mean: f64,
    pub ea_std: f64,
    pub ia_mean: f64,
    pub ia_std: f64,
    pub md_mean: f64,
    pub md_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per method, in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.name()) {
            methods.push(r.method.name());
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method.name() == m).collect();
            let reports: Vec<_> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
            let col = |f: fn(&crate::metrics::MetricReport) -> f64| {
                mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (ta_mean, ta_std) = col(|r| r.ta);
            let (ea_mean, ea_std) = col(|r| r.ea);
            let (ia_mean, ia_std) = col(|r| r.ia);
            let (md_mean, md_std) = col(|r| r.md);
            SummaryRow {
                method: m.to_string(),
                runs: runs.len(),
                failed: runs.len() - reports.len(),
                ta_mean,
                ta_std,
                ea_mean,
                ea_std,
                ia_mean,
                ia_std,
                md_mean,
                md_std,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct MatrixRow<'a> {
    method: &'a str,
    order_seed: u64,
    i: usize,
    j: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    method: &'a str,
    order_seed: u64,
    /// Tasks trained so far, minus one.
    task: usize,
    /// Mean accuracy over the test sets of tasks `0..=task`.
    seen_accuracy: f64,
    current_accuracy: f64,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    runs: &'a [RunRecord],
    summary: Vec<SummaryRow>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `metrics.json`, `matrix.csv` (one row per defined cell),
/// `summary.csv` and `curves.csv` into `dir`.
pub fn emit_results(records: &[RunRecord], dir: &Path) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Config("no run records to emit".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary = summarize(records);

    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&MetricsFile {
        runs: records,
        summary: summary.clone(),
    })
    .map_err(|e| HarnessError::Io(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))?;

    let mut cells = Vec::new();
    let mut curves = Vec::new();
    for r in records {
        let Some(m) = &r.matrix else { continue };
        for (i, j, accuracy) in m.defined() {
            cells.push(MatrixRow {
                method: r.method.name(),
                order_seed: r.order_seed,
                i,
                j,
                accuracy,
            });
        }
        for j in 0..m.k() {
            let seen: Vec<f64> = (0..=j).filter_map(|i| m.get(i, j)).collect();
            if seen.len() != j + 1 {
                continue;
            }
            curves.push(CurveRow {
                method: r.method.name(),
                order_seed: r.order_seed,
                task: j,
                seen_accuracy: seen.iter().sum::<f64>() / seen.len() as f64,
                current_accuracy: seen[j],
            });
        }
    }
    write_csv(&dir.join("matrix.csv"), cells)?;
    write_csv(&dir.join("curves.csv"), curves)?;
    write_csv(&dir.join("summary.csv"), &summary)
}

/// JSON lines: `{"task": j, ...DistillRecord}` per training example.
pub fn write_distill_records(
    per_task: &[Vec<DistillRecord>],
    path: &Path,
) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Line<'a> {
        task: usize,
        #[serde(flatten)]
        record: &'a DistillRecord,
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    // Distillation starts at task 1; task 0 is the adapted initial task.
    for (n, records) in per_task.iter().enumerate() {
        for record in records {
            let line = serde_json::to_string(&Line {
                task: n + 1,
                record,
            })
            .map_err(|e| HarnessError::Io(e.to_string()))?;
            writeln!(f, "{line}").map_err(io_err(path))?;
        }
    }
    f.flush().map_err(io_err(path))
}
