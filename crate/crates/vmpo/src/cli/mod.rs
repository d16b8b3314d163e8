//! Experiment runner: `train` writes metrics CSV and SVG convergence plots,
//! `verify` runs the oracle suite, `sweep` runs a grid over temperature and
//! objective. Exit codes: 2 for argument or config errors, 1 for failed
//! verification or runtime errors, 0 otherwise.

pub mod config;
pub mod plot;

pub use config::{parse_config, parse_config_str, serialise_config};

use crate::core::{ObjectiveSpec, PotentialSpec};
use crate::error::{invalid, Error, Result};
use crate::trainer::{train, MetricsRow, ModelKind, TrainConfig};
use crate::verify;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::Path;
use std::str::FromStr;

pub const CSV_HEADER: &str = "epoch,mean_reward,kl_to_ref,loss,ess,tv_to_tilt,seconds";

#[derive(Parser)]
#[command(name = "vmpo", about = "Variance-minimisation policy optimisation on toy chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config file; writes metrics.csv and per-metric SVGs.
    Train {
        config: String,
        /// Record wall-clock seconds per evaluation row.
        #[arg(long)]
        timing: bool,
        /// Skip SVG emission.
        #[arg(long)]
        no_plot: bool,
    },
    /// Run the full oracle suite on the config's fixture sizes.
    Verify { config: String },
    /// Grid over beta and objective kinds; one CSV per cell.
    Sweep {
        config: String,
        /// Comma-separated temperatures; defaults to the config's beta.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        /// Comma-separated objective kinds; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        objectives: Vec<String>,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Exact-schema CSV; float fields use the shortest round-tripping decimal.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.mean_reward,
            r.kl_to_ref,
            r.loss,
            r.ess,
            fmt_opt(r.tv_to_tilt),
            fmt_opt(r.seconds)
        ));
    }
    out
}

/// Inverse of `metrics_to_csv`; lossless on its output.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(invalid(format!("bad CSV header: {other:?}"))),
    }
    let field = |s: &str, line: usize| -> Result<f64> {
        s.parse()
            .map_err(|_| invalid(format!("line {line}: bad float '{s}'")))
    };
    let opt_field = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            field(s, line).map(Some)
        }
    };
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(invalid(format!("line {line_no}: expected 7 fields")));
        }
        rows.push(MetricsRow {
            epoch: parts[0]
                .parse()
                .map_err(|_| invalid(format!("line {line_no}: bad epoch '{}'", parts[0])))?,
            mean_reward: field(parts[1], line_no)?,
            kl_to_ref: field(parts[2], line_no)?,
            loss: field(parts[3], line_no)?,
            ess: field(parts[4], line_no)?,
            tv_to_tilt: opt_field(parts[5], line_no)?,
            seconds: opt_field(parts[6], line_no)?,
        });
    }
    Ok(rows)
}

fn write_plots(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let series = |get: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| get(r).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    let charts: [(&str, &dyn Fn(&MetricsRow) -> Option<f64>); 6] = [
        ("mean_reward", &|r| Some(r.mean_reward)),
        ("kl_to_ref", &|r| Some(r.kl_to_ref)),
        ("loss", &|r| Some(r.loss)),
        ("ess", &|r| Some(r.ess)),
        ("tv_to_tilt", &|r| r.tv_to_tilt),
        ("seconds", &|r| r.seconds),
    ];
    for (name, get) in charts {
        let points = series(get);
        // Optional columns get a chart only when populated.
        if !points.is_empty() || matches!(name, "mean_reward" | "kl_to_ref" | "loss" | "ess") {
            plot::write_metric_chart(dir, name, &points)?;
        }
    }
    Ok(())
}

fn run_train(config_path: &str, timing: bool, no_plot: bool) -> Result<()> {
    let mut config = parse_config(config_path)?;
    config.timing = timing;
    let out_dir = Path::new(&config.out_dir).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let (rows, _trainer) = train(config)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&rows))?;
    if !no_plot {
        write_plots(&out_dir, &rows)?;
    }
    Ok(())
}

fn run_verify(config_path: &str) -> Result<bool> {
    let config = parse_config(config_path)?;
    let outcomes = verify::run_all(
        config.num_states,
        config.steps,
        config.objective.beta,
        config.seed,
    )?;
    let mut all_pass = true;
    for outcome in &outcomes {
        println!("{outcome}");
        all_pass &= outcome.pass;
    }
    Ok(all_pass)
}

fn run_sweep(config_path: &str, betas: &[f64], objectives: &[String]) -> Result<()> {
    let base = parse_config(config_path)?;
    let betas = if betas.is_empty() {
        vec![base.objective.beta]
    } else {
        betas.to_vec()
    };
    let objectives: Vec<_> = if objectives.is_empty() {
        vec![base.objective.kind]
    } else {
        objectives
            .iter()
            .map(|s| FromStr::from_str(s))
            .collect::<Result<_>>()?
    };
    let out_dir = Path::new(&base.out_dir).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    for &beta in &betas {
        for &objective in &objectives {
            let mut config = base.clone();
            config.objective = ObjectiveSpec::new(
                objective,
                beta,
                base.objective.clip_eps,
                base.objective.kl_old_coeff,
                PotentialSpec::new(base.objective.potential.kind, beta)?,
            )?;
            let (rows, _) = train(config)?;
            let name = format!("{}_beta{}.csv", objective.as_str(), beta);
            std::fs::write(out_dir.join(name), metrics_to_csv(&rows))?;
        }
    }
    Ok(())
}

fn config_error(err: &Error) -> bool {
    matches!(
        err,
        Error::ConfigParse { .. } | Error::InvalidArgument(_) | Error::Io(_)
    )
}

/// Entry point: returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train {
            config,
            timing,
            no_plot,
        } => run_train(config, *timing, *no_plot).map(|_| 0),
        Command::Verify { config } => run_verify(config).map(|ok| if ok { 0 } else { 1 }),
        Command::Sweep {
            config,
            betas,
            objectives,
        } => run_sweep(config, betas, objectives).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if config_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

/// Default train config for a given model kind, serialised; the shipped
/// fixture for `verify` and quick starts.
pub fn default_config_text(model: ModelKind) -> String {
    let mut config = TrainConfig::default();
    config.model = model;
    serialise_config(&config)
}
