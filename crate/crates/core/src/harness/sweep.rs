use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError, Runner, SummaryRow};
use crate::seq2seq::SizeTag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    PromptLength,
    R,
    Eta,
    ModelSize,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::PromptLength => "prompt-length",
            SweepAxis::R => "r",
            SweepAxis::Eta => "eta",
            SweepAxis::ModelSize => "model-size",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompt-length" | "m" => Ok(SweepAxis::PromptLength),
            "r" => Ok(SweepAxis::R),
            "eta" => Ok(SweepAxis::Eta),
            "model-size" => Ok(SweepAxis::ModelSize),
            other => Err(HarnessError::Config(format!(
                "unknown sweep axis {other:?}; expected prompt-length, r, eta or model-size"
            ))),
        }
    }
}

impl SweepAxis {
    /// `base` with the axis set to `value`.
    pub fn apply(
        self,
        base: &ExperimentConfig,
        value: &str,
    ) -> Result<ExperimentConfig, HarnessError> {
        let bad = || HarnessError::Config(format!("invalid {self} value {value:?}"));
        let mut cfg = base.clone();
        match self {
            SweepAxis::PromptLength => cfg.prompt_len = value.parse().map_err(|_| bad())?,
            SweepAxis::R => cfg.retriever.r = value.parse().map_err(|_| bad())?,
            SweepAxis::Eta => cfg.retriever.eta = value.parse().map_err(|_| bad())?,
            SweepAxis::ModelSize => {
                cfg.student = match value {
                    "small" => SizeTag::Small,
                    "large" => SizeTag::Large,
                    _ => return Err(bad()),
                }
            }
        }
        cfg.validate()
            .map_err(|e| HarnessError::Config(format!("{self}={value}: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: SweepAxis,
    pub value: String,
    pub method: String,
    pub summary: Option<SummaryRow>,
    /// Mean teacher test accuracy over tasks and orders, when a teacher runs.
    pub teacher_ia: Option<f64>,
    /// Mean share of training examples with qualifying demonstrations.
    pub context_rate: Option<f64>,
    pub error: Option<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One full experiment per value. Every value is checked before anything
/// runs; a failing cell is recorded and the sweep moves on.
pub fn sweep(
    runner: &mut Runner,
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepCell>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cells = Vec::new();
    for (value, cfg) in values.iter().zip(configs) {
        log::info!("sweep {axis}={value}");
        let mut cell = SweepCell {
            axis,
            value: value.clone(),
            method: cfg.method.name().to_string(),
            summary: None,
            teacher_ia: None,
            context_rate: None,
            error: None,
        };
        match runner.run_experiment(&cfg) {
            Ok(exp) => {
                let errors: Vec<String> =
                    exp.records.iter().filter_map(|r| r.error.clone()).collect();
                if !errors.is_empty() {
                    cell.error = Some(errors.join("; "));
                }
                cell.teacher_ia = mean(
                    exp.records
                        .iter()
                        .flat_map(|r| r.teacher_accuracy.iter().copied()),
                );
                cell.context_rate = mean(
                    exp.records
                        .iter()
                        .flat_map(|r| r.context_rates.iter().copied()),
                );
                cell.summary = exp.summary;
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        cells.push(cell);
    }
    Ok(cells)
}

#[derive(Serialize)]
struct Row<'a> {
    axis: String,
    value: &'a str,
    method: &'a str,
    ta: Option<f64>,
    ta_std: Option<f64>,
    ea: Option<f64>,
    ia: Option<f64>,
    md: Option<f64>,
    teacher_ia: Option<f64>,
    context_rate: Option<f64>,
    error: Option<&'a str>,
}

pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for c in cells {
        let s = c.summary.as_ref();
        w.serialize(Row {
            axis: c.axis.to_string(),
            value: &c.value,
            method: &c.method,
            ta: s.map(|s| s.ta_mean),
            ta_std: s.map(|s| s.ta_std),
            ea: s.map(|s| s.ea_mean),
            ia: s.map(|s| s.ia_mean),
            md: s.map(|s| s.md_mean),
            teacher_ia: c.teacher_ia,
            context_rate: c.context_rate,
            error: c.error.as_deref(),
        })
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}
