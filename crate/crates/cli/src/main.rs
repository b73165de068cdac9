use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use harvest_cli::tables::write_atomic;
use harvest_cli::{build_report, calibrate_text, cdf_from_reader, load_scenario, output_dir, run_scenario, CliError};
use harvest_sim::traces::{Aggregation, ParseMode};

#[derive(Parser)]
#[command(name = "harvest", version, about = "Simulate harvesting spare peer-GPU memory for LLM inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TraceMode {
    /// Reject the whole trace on the first malformed row (default).
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Skip malformed rows and count them.
    #[arg(long)]
    lenient: bool,
}

impl TraceMode {
    fn mode(&self) -> ParseMode {
        if self.lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    Max,
    PerSnapshot,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write per-seed metrics tables plus a summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory; overrides the scenario's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds to run; replaces the scenario's list. Repeatable.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Calibration profile; overrides the scenario's `profile`.
        #[arg(long)]
        profile: Option<String>,
        #[command(flatten)]
        trace: TraceMode,
    },
    /// Fit fixed cost and bandwidth of a link from measured points.
    Calibrate {
        /// File of `size_bytes,latency_seconds` lines.
        #[arg(long)]
        points: PathBuf,
        /// expert_peer, expert_host, kv_peer or kv_host.
        #[arg(long)]
        link: String,
        /// Directory to write `<link>.toml` into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Utilization CDF of a snapshot trace.
    Cdf {
        #[arg(long)]
        trace: PathBuf,
        /// Directory to write `cdf.csv` into.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long, value_enum, default_value = "mean")]
        aggregation: AggregationArg,
        #[command(flatten)]
        mode: TraceMode,
    },
    /// Print aligned tables from a metrics directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            scenario,
            out,
            seeds,
            profile,
            trace,
        } => {
            let resolved = load_scenario(&scenario, &seeds, profile.as_deref())?;
            let dir = output_dir(&resolved, out.as_deref())?;
            let outcome = run_scenario(&resolved, &dir, trace.mode())?;
            println!(
                "{}: {} seed(s), metrics in {}",
                resolved.scenario.name,
                outcome.per_seed.len(),
                outcome.out_dir.display()
            );
        }
        Command::Calibrate { points, link, out } => {
            let text = std::fs::read_to_string(&points)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", points.display())))?;
            let result = calibrate_text(&text, &link)?;
            let p = result.fit.params;
            println!("fixed_cost_s = {:e}", p.fixed_cost);
            println!("bandwidth_bytes_per_s = {:e}", p.bandwidth);
            println!("rms_relative_error = {:e}", result.fit.rms_relative_error);
            if let Some(dir) = out {
                write_atomic(&dir.join(format!("{link}.toml")), result.fragment.as_bytes())?;
            }
        }
        Command::Cdf {
            trace,
            out,
            resolution,
            aggregation,
            mode,
        } => {
            let file = std::fs::File::open(&trace)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", trace.display())))?;
            let aggregation = match aggregation {
                AggregationArg::Mean => Aggregation::Mean,
                AggregationArg::Max => Aggregation::Max,
                AggregationArg::PerSnapshot => Aggregation::PerSnapshot,
            };
            let result = cdf_from_reader(file, mode.mode(), resolution, aggregation)?;
            if result.rejected > 0 {
                eprintln!("warning: skipped {} malformed row(s)", result.rejected);
            }
            print!("{}", result.anchors);
            if let Some(dir) = out {
                write_atomic(&dir.join("cdf.csv"), result.cdf.to_csv().as_bytes())?;
            }
        }
        Command::Report { out } => {
            let report = build_report(&out);
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
