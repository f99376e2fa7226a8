use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pseudolab::cli::{self, Axis};
use pseudolab::metrics::DEFAULT_BINS;
use pseudolab::Error;

#[derive(Parser)]
#[command(name = "pseudolab", version, about = "Pseudo-label weighting experiments on synthetic 2-D data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its traces, checkpoints and manifest.
    Run {
        /// Config file of `key = value` lines; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override one config key, `key=value`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Recompute quantity and quality on the whole unlabeled set at each logged step.
        #[arg(long)]
        full_metrics: bool,
    },
    /// Run the Cartesian product of seeds and axes, one directory per cell.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Swept key with its values, `key=v1,v2,...`. Repeatable.
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
        #[arg(long)]
        full_metrics: bool,
    },
    /// Render a model's decision boundary over a dataset as CSV and SVG.
    Boundary {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV, e.g. the `dataset.csv` of a run.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence histogram of an outcome dump.
    Hist {
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Run directory whose config and state give the weighting curve.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<i32, Error> {
    match command {
        Command::Run {
            config,
            out,
            overrides,
            full_metrics,
        } => {
            let s = cli::cmd_run(config.as_deref(), &overrides, full_metrics, &out)?;
            println!(
                "run {} done: eval_error={} quantity={} quality={}",
                s.manifest.run_id,
                fmt(s.final_eval_error),
                fmt(s.final_quantity),
                fmt(s.final_quality)
            );
            Ok(0)
        }
        Command::Sweep {
            config,
            out,
            overrides,
            seeds,
            axes,
            full_metrics,
        } => {
            let axes = axes.iter().map(|a| a.parse()).collect::<Result<Vec<Axis>, _>>()?;
            let report = cli::cmd_sweep(config.as_deref(), &overrides, seeds.as_deref(), &axes, full_metrics, &out)?;
            for c in report.cells.iter().filter(|c| c.exit_code != 0) {
                eprintln!("cell {} failed: {}", c.index, c.outcome.as_ref().err().map_or("", String::as_str));
            }
            println!(
                "{} cells, {} failed; summary at {}",
                report.cells.len(),
                report.failures(),
                report.summary_path.display()
            );
            Ok(if report.failures() == 0 { 0 } else { 1 })
        }
        Command::Boundary {
            checkpoint,
            dataset,
            resolution,
            out,
        } => {
            let r = cli::cmd_boundary(&checkpoint, &dataset, resolution, &out)?;
            println!(
                "{} grid rows, {} contour segments, grid accuracy {:.4}",
                r.rows, r.contour_segments, r.grid_accuracy
            );
            Ok(0)
        }
        Command::Hist {
            outcomes,
            bins,
            run,
            out,
        } => {
            cli::cmd_hist(&outcomes, bins, run.as_deref(), &out)?;
            Ok(0)
        }
    }
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match dispatch(args.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
