//! Exact match, the accuracy matrix and the stream-level metrics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::seq2seq::split_tokens;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

const KEYWORDS: &[&str] = &[
    "select", "from", "where", "count", "max", "min", "sum", "avg", "group", "by", "order", "join",
    "using", "on", "and", "or", "not", "as", "limit", "distinct", "having", "asc", "desc", "in",
    "like",
];

/// Token sequence used for matching: punctuation split out, whitespace
/// collapsed, keywords upper-cased.
pub fn normalize_sql(sql: &str) -> Vec<String> {
    split_tokens(sql)
        .into_iter()
        .map(|t| {
            if KEYWORDS.contains(&t.to_ascii_lowercase().as_str()) {
                t.to_ascii_uppercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_sql(pred) == normalize_sql(gold)
}

/// `a[i][j]`: accuracy on test set `i` after training task `j`. Cells with
/// `j < i` (or not yet measured) hold no value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    k: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            cells: vec![None; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.k && j < self.k {
            self.cells[i * self.k + j]
        } else {
            None
        }
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<(), MetricsError> {
        if i >= self.k || j >= self.k || j < i {
            return Err(MetricsError::Contract(format!(
                "cell ({i}, {j}) undefined for K={}",
                self.k
            )));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(MetricsError::Contract(format!(
                "accuracy {value} outside [0, 100]"
            )));
        }
        self.cells[i * self.k + j] = Some(value);
        Ok(())
    }

    fn need(&self, i: usize, j: usize) -> Result<f64, MetricsError> {
        self.get(i, j)
            .ok_or_else(|| MetricsError::Contract(format!("cell ({i}, {j}) not measured")))
    }

    /// Defined cells in row-major order.
    pub fn defined(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.k {
            for j in i..self.k {
                if let Some(v) = self.get(i, j) {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    /// True when every cell with `i ≤ j ≤ last` is measured.
    pub fn columns_complete(&self, last: usize) -> bool {
        (0..=last.min(self.k.saturating_sub(1))).all(|j| (0..=j).all(|i| self.get(i, j).is_some()))
    }
}

impl fmt::Display for AccuracyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k)
                .map(|j| {
                    self.get(i, j)
                        .map_or_else(|| "    -".to_string(), |v| format!("{v:5.1}"))
                })
                .collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// `100 · matches / n`.
pub fn accuracy(matches: usize, n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::Contract(
            "accuracy over an empty test set".into(),
        ));
    }
    Ok(100.0 * matches as f64 / n as f64)
}

/// Scores predictions against golds; returns `a_{i,j}` and per-example
/// match flags.
pub fn evaluate_task(
    predictions: &[String],
    golds: &[String],
) -> Result<(f64, Vec<bool>), MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::Contract(format!(
            "{} predictions for {} examples",
            predictions.len(),
            golds.len()
        )));
    }
    let flags: Vec<bool> = predictions
        .iter()
        .zip(golds)
        .map(|(p, g)| exact_match(p, g))
        .collect();
    let acc = accuracy(flags.iter().filter(|&&m| m).count(), golds.len())?;
    Ok((acc, flags))
}

/// TA: mean of the last column.
pub fn task_accuracy(m: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let k = m.k();
    if k == 0 {
        return Err(MetricsError::Contract("empty matrix".into()));
    }
    let mut sum = 0.0;
    for i in 0..k {
        sum += m.need(i, k - 1)?;
    }
    Ok(sum / k as f64)
}

/// IA: mean of the diagonal.
pub fn initial_accuracy(m: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let k = m.k();
    if k == 0 {
        return Err(MetricsError::Contract("empty matrix".into()));
    }
    let mut sum = 0.0;
    for i in 0..k {
        sum += m.need(i, i)?;
    }
    Ok(sum / k as f64)
}

/// MD: mean over `i < K−1` of `a_{i,K−1} − a_{i,i}`.
pub fn memory_decay(m: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let k = m.k();
    if k < 2 {
        return Err(MetricsError::Contract("memory decay needs K ≥ 2".into()));
    }
    let mut sum = 0.0;
    for i in 0..k - 1 {
        sum += m.need(i, k - 1)? - m.need(i, i)?;
    }
    Ok(sum / (k - 1) as f64)
}

/// EA: micro-averaged accuracy over the union of test sets, given the final
/// match flags of every task.
pub fn example_accuracy(final_flags: &[Vec<bool>]) -> Result<f64, MetricsError> {
    let n: usize = final_flags.iter().map(Vec::len).sum();
    let hits = final_flags.iter().flatten().filter(|&&m| m).count();
    accuracy(hits, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub order_seed: u64,
    pub k: usize,
    pub ta: f64,
    pub ea: f64,
    pub ia: f64,
    pub md: f64,
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Test set the example belongs to.
    pub task: usize,
    /// Task after whose training the prediction was made.
    pub checkpoint: usize,
    pub example: usize,
    pub prediction: String,
    pub gold: String,
    #[serde(rename = "match")]
    pub matched: bool,
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), MetricsError> {
    let io = |e: std::io::Error| MetricsError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| MetricsError::Parse(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, MetricsError> {
    let text = fs::read_to_string(path)
        .map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Parse(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Rebuilds the matrix and all four metrics from a prediction dump.
pub fn report_from_predictions(
    records: &[PredictionRecord],
    k: usize,
    method: &str,
    order_seed: u64,
) -> Result<(AccuracyMatrix, MetricReport), MetricsError> {
    let mut counts = vec![(0usize, 0usize); k * k];
    for r in records {
        if r.task >= k || r.checkpoint >= k {
            return Err(MetricsError::Contract(format!(
                "record for ({}, {}) outside K={k}",
                r.task, r.checkpoint
            )));
        }
        let c = &mut counts[r.task * k + r.checkpoint];
        c.0 += r.matched as usize;
        c.1 += 1;
    }
    let mut m = AccuracyMatrix::new(k);
    for i in 0..k {
        for j in i..k {
            let (hits, n) = counts[i * k + j];
            if n > 0 {
                m.set(i, j, accuracy(hits, n)?)?;
            }
        }
    }
    let last = k
        .checked_sub(1)
        .ok_or_else(|| MetricsError::Contract("K = 0".into()))?;
    let final_flags: Vec<Vec<bool>> = (0..k)
        .map(|i| {
            records
                .iter()
                .filter(|r| r.task == i && r.checkpoint == last)
                .map(|r| r.matched)
                .collect()
        })
        .collect();
    let report = MetricReport {
        method: method.to_string(),
        order_seed,
        k,
        ta: task_accuracy(&m)?,
        ea: example_accuracy(&final_flags)?,
        ia: initial_accuracy(&m)?,
        md: if k >= 2 { memory_decay(&m)? } else { 0.0 },
    };
    Ok((m, report))
}
