//! Scenario runner behind the `harvest` binary.
//!
//! Each subcommand is a plain function here so tests can drive it without
//! spawning a process; `main.rs` only parses arguments and maps errors to
//! exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use harvest_sim::interconnect::{calibrate, parse_points, Calibration};
use harvest_sim::traces::{compute_cdf_with, parse_snapshots, Aggregation, ParseMode, UtilizationCdf};
use thiserror::Error;

pub mod report;
pub mod run;
pub mod scenario;
pub mod tables;

pub use report::{build_report, Report};
pub use run::{output_dir, run_scenario, simulate_seed, RunOutcome};
pub use scenario::{Resolved, Scenario};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad scenario, bad input file or an unresolvable reference.
    #[error("configuration error: {0}")]
    Config(String),
    /// The simulation broke one of its own guarantees.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode table: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io { .. } | CliError::Output(_) => 1,
        }
    }
}

/// Loads and resolves a scenario file; relative paths inside it resolve
/// against the file's directory.
pub fn load_scenario(path: &Path, seeds: &[u64], profile: Option<&str>) -> Result<Resolved, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    Scenario::load(path)?.resolve(seeds, profile, base)
}

pub struct CalibrateOutput {
    pub fit: Calibration,
    /// TOML fragment that can be pasted under a scenario's `[links]` table.
    pub fragment: String,
}

/// Fits a link from `size_bytes,latency_seconds` lines.
pub fn calibrate_text(text: &str, link: &str) -> Result<CalibrateOutput, CliError> {
    if !scenario::LINK_NAMES.contains(&link) {
        return Err(CliError::Config(format!(
            "link: unknown link {link:?}, expected one of {}",
            scenario::LINK_NAMES.join(", ")
        )));
    }
    let points = parse_points(text).map_err(|e| CliError::Config(format!("points: {e}")))?;
    let fit = calibrate(&points).map_err(|e| CliError::Config(format!("points: {e}")))?;
    let mut fragment = String::new();
    let _ = writeln!(fragment, "# rms_relative_error = {:e}", fit.rms_relative_error);
    if fit.clamped {
        fragment.push_str("# fixed cost clamped to zero\n");
    }
    let _ = writeln!(fragment, "[links.{link}]");
    let _ = writeln!(fragment, "fixed_cost_s = {:e}", fit.params.fixed_cost);
    let _ = writeln!(fragment, "bandwidth_bytes_per_s = {:e}", fit.params.bandwidth);
    Ok(CalibrateOutput { fit, fragment })
}

pub struct CdfOutput {
    pub cdf: UtilizationCdf,
    pub rejected: usize,
    /// Lines comparing CDF(0.20) and CDF(0.50) with the fleet anchors.
    pub anchors: String,
}

pub fn cdf_from_reader<R: std::io::Read>(
    input: R,
    mode: ParseMode,
    resolution: usize,
    aggregation: Aggregation,
) -> Result<CdfOutput, CliError> {
    let outcome = parse_snapshots(input, mode).map_err(|e| CliError::Config(format!("trace: {e}")))?;
    let cdf = compute_cdf_with(&outcome.records, resolution, aggregation)
        .map_err(|e| CliError::Config(format!("trace: {e}")))?;
    let mut anchors = String::new();
    for (u, anchor) in [(0.20, 0.68), (0.50, 0.87)] {
        let _ = writeln!(
            anchors,
            "CDF({u:.2}) = {:.4}  (fleet anchor about {anchor:.2})",
            cdf.cdf_at(u)
        );
    }
    Ok(CdfOutput {
        cdf,
        rejected: outcome.rejected.len(),
        anchors,
    })
}
