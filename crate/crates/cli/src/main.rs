use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c3_core::harness::{
    emit_results, ordered_stream_json, summarize, sweep, write_sweep_csv, ExperimentConfig,
    HarnessError, MethodKind, RunRecord, Runner, SummaryRow, SweepAxis,
};
use c3_core::metrics::{read_predictions, report_from_predictions};
use c3_core::taskstream::{generate_stream, save_stream};
use clap::{Args, Parser, Subcommand};

/// Continual text-to-SQL experiments on a synthetic task stream.
///
/// Log verbosity follows `C3_LOG` (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "c3", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON); missing fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy", value_parser = ["toy", "paper"])]
    preset: String,
    /// fine-tune, peft, c3, teacher-only, multi-task, no-task-adapt,
    /// continual-init or c3-no-ict.
    #[arg(long)]
    method: Option<MethodKind>,
    /// Order seed; repeat for several orders.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated (pre-merge) stream as JSON.
    GenStream {
        #[command(flatten)]
        common: Common,
        /// Write the merged stream in the order given by the first --seed
        /// instead.
        #[arg(long)]
        ordered: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method over every order seed and write results.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// One experiment per value along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// prompt-length, r, eta or model-size.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from the prediction dumps of a results directory.
    Report {
        /// Directory written by `run`, or a single predictions.jsonl.
        path: PathBuf,
        /// Number of tasks; required for a single dump.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        method: Option<MethodKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            let preset = serde_json::to_value(ExperimentConfig::preset(&common.preset)?)
                .expect("config serializes");
            let user: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_value(merge(preset, user))
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::preset(&common.preset)?,
    };
    if let Some(m) = common.method {
        cfg.method = m;
    }
    if !common.seeds.is_empty() {
        cfg.order_seeds = common.seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Overlays `user` onto `base`, recursing into objects.
fn merge(base: serde_json::Value, user: serde_json::Value) -> serde_json::Value {
    match (base, user) {
        (serde_json::Value::Object(mut b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            serde_json::Value::Object(b)
        }
        (_, u) => u,
    }
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<16} {:>5} {:>14} {:>14} {:>14} {:>14}",
        "method", "runs", "TA", "EA", "IA", "MD"
    );
    for r in rows {
        println!(
            "{:<16} {:>5} {:>7.2} ± {:<4.2} {:>7.2} ± {:<4.2} {:>7.2} ± {:<4.2} {:>7.2} ± {:<4.2}",
            r.method,
            r.runs,
            r.ta_mean,
            r.ta_std,
            r.ea_mean,
            r.ea_std,
            r.ia_mean,
            r.ia_std,
            r.md_mean,
            r.md_std
        );
    }
}

fn run(cfg: ExperimentConfig, out: &Path) -> Result<bool, HarnessError> {
    let cfg = ExperimentConfig {
        out_dir: Some(out.to_path_buf()),
        ..cfg
    };
    let exp = Runner::new().run_experiment(&cfg)?;
    emit_results(&exp.records, out)?;
    for r in &exp.records {
        if let Some(m) = &r.matrix {
            println!(
                "{} order {} ({:.0}s)\n{m}",
                r.method,
                r.order_seed,
                r.task_seconds.iter().sum::<f64>()
            );
        }
        if let Some(e) = &r.error {
            eprintln!("{} order {} failed: {e}", r.method, r.order_seed);
        }
    }
    print_summary(&summarize(&exp.records));
    Ok(exp.records.iter().all(|r| r.error.is_none()))
}

fn report(
    path: &Path,
    k: Option<usize>,
    method: Option<MethodKind>,
    seed: u64,
) -> Result<bool, HarnessError> {
    if path.is_file() {
        let k =
            k.ok_or_else(|| HarnessError::Config("--k is required for a single dump".into()))?;
        let name = method.map_or("unknown", MethodKind::name);
        let (m, rep) = report_from_predictions(&read_predictions(path)?, k, name, seed)?;
        println!("{m}");
        println!(
            "{}",
            serde_json::to_string_pretty(&rep).expect("report serializes")
        );
        return Ok(true);
    }
    let mpath = path.join("metrics.json");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", mpath.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", mpath.display())))?;
    let runs: Vec<RunRecord> = serde_json::from_value(value["runs"].clone())
        .map_err(|e| HarnessError::Config(format!("{}: {e}", mpath.display())))?;
    let mut ok = true;
    for r in &runs {
        let Some(stored) = &r.report else {
            println!(
                "{} order {}: failed run ({})",
                r.method,
                r.order_seed,
                r.error.as_deref().unwrap_or("?")
            );
            continue;
        };
        let (_, again) = r.recompute()?;
        let same = [
            (stored.ta, again.ta),
            (stored.ea, again.ea),
            (stored.ia, again.ia),
            (stored.md, again.md),
        ]
        .iter()
        .all(|(a, b)| (a - b).abs() <= 1e-9);
        ok &= same;
        println!(
            "{} order {}: TA {:.2} EA {:.2} IA {:.2} MD {:.2} [{}]",
            r.method,
            r.order_seed,
            again.ta,
            again.ea,
            again.ia,
            again.md,
            if same { "matches" } else { "MISMATCH" }
        );
    }
    print_summary(&summarize(&runs));
    Ok(ok)
}

fn execute(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::GenStream {
            common,
            ordered,
            out,
        } => {
            let cfg = load_config(&common)?;
            if ordered {
                let json = ordered_stream_json(&cfg, cfg.order_seeds[0])?;
                std::fs::write(&out, json)
                    .map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
            } else {
                save_stream(&generate_stream(&cfg.stream)?, &out)?;
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Run { common, out } => run(load_config(&common)?, &out),
        Command::Sweep {
            common,
            axis,
            values,
            out,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
            let cells = sweep(&mut Runner::new(), &cfg, axis, &values)?;
            write_sweep_csv(&cells, &out.join("sweep.csv"))?;
            for c in &cells {
                match (&c.summary, &c.error) {
                    (Some(s), None) => println!(
                        "{axis}={:<6} TA {:.2} ± {:.2}  IA {:.2}",
                        c.value, s.ta_mean, s.ta_std, s.ia_mean
                    ),
                    (_, Some(e)) => println!("{axis}={:<6} failed: {e}", c.value),
                    _ => {}
                }
            }
            Ok(cells.iter().all(|c| c.error.is_none()))
        }
        Command::Report {
            path,
            k,
            method,
            seed,
        } => report(&path, k, method, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("C3_LOG", "info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
