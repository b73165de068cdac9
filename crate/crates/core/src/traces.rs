//! Cluster snapshot ingestion, GPU-memory utilization CDFs and the peer
//! availability processes that drive capacity changes in simulation.
//!
//! Snapshot files are comma-separated with a required header row:
//!
//! ```text
//! machine_id,timestamp,used,capacity
//! m-0001,0,12884901888,85899345920
//! ```
//!
//! `timestamp` is in seconds, `used` and `capacity` in bytes.

use std::collections::BTreeMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memalloc::{DeviceId, DeviceSpec};
use crate::runtime::Runtime;
use crate::sim::SimTime;

pub const SNAPSHOT_HEADER: [&str; 4] = ["machine_id", "timestamp", "used", "capacity"];

/// Twenty snapshots over six machines, with per-machine means worked out by
/// hand in `HAND_FIXTURE_CDF`.
pub const HAND_FIXTURE: &str = include_str!("../fixtures/hand_snapshots.csv");

/// Expected `(utilization, cumulative_fraction)` for [`HAND_FIXTURE`] at
/// resolution 10.
pub const HAND_FIXTURE_CDF: &str = include_str!("../fixtures/hand_snapshots.cdf.csv");

/// The synthetic population shaped to the published anchors.
pub const SYNTHETIC_POPULATION: &str = include_str!("../fixtures/synthetic_population.csv");

/// Generator arguments that produced [`SYNTHETIC_POPULATION`].
pub const SYNTHETIC_MACHINES: usize = 500;
pub const SYNTHETIC_SNAPSHOTS: usize = 4;
pub const SYNTHETIC_SEED: u64 = 2021;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub machine_id: String,
    pub timestamp: f64,
    pub used: u64,
    pub capacity: u64,
}

impl SnapshotRecord {
    pub fn utilization(&self) -> f64 {
        self.used as f64 / self.capacity as f64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: used {used} exceeds capacity {capacity}")]
    UsedExceedsCapacity { line: u64, used: u64, capacity: u64 },
    #[error("line {line}: capacity must be positive")]
    ZeroCapacity { line: u64 },
    #[error("missing or wrong header, expected {expected}")]
    BadHeader { expected: String },
    #[error("no snapshot records")]
    Empty,
    #[error("resolution must be positive")]
    ZeroResolution,
    #[error("no records for machine '{0}'")]
    UnknownMachine(String),
    #[error("invalid availability parameters: {0}")]
    InvalidProcess(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// The first bad row aborts parsing.
    #[default]
    Strict,
    /// Bad rows are counted and skipped.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParseOutcome {
    pub records: Vec<SnapshotRecord>,
    /// Rejected rows in lenient mode.
    pub rejected: Vec<TraceError>,
}

fn row_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_row(record: &csv::StringRecord) -> Result<SnapshotRecord, TraceError> {
    let line = row_line(record);
    if record.len() != 4 {
        return Err(TraceError::Malformed {
            line,
            message: format!("expected 4 fields, found {}", record.len()),
        });
    }
    let field = |i: usize| record[i].trim();
    let num = |i: usize| -> Result<u64, TraceError> {
        field(i).parse::<u64>().map_err(|_| TraceError::Malformed {
            line,
            message: format!("{} '{}' is not a non-negative integer", SNAPSHOT_HEADER[i], field(i)),
        })
    };
    let machine_id = field(0).to_string();
    if machine_id.is_empty() {
        return Err(TraceError::Malformed {
            line,
            message: "empty machine_id".into(),
        });
    }
    let timestamp: f64 = field(1).parse().map_err(|_| TraceError::Malformed {
        line,
        message: format!("timestamp '{}' is not a number", field(1)),
    })?;
    if !timestamp.is_finite() {
        return Err(TraceError::Malformed {
            line,
            message: "timestamp must be finite".into(),
        });
    }
    let used = num(2)?;
    let capacity = num(3)?;
    if capacity == 0 {
        return Err(TraceError::ZeroCapacity { line });
    }
    if used > capacity {
        return Err(TraceError::UsedExceedsCapacity {
            line,
            used,
            capacity,
        });
    }
    Ok(SnapshotRecord {
        machine_id,
        timestamp,
        used,
        capacity,
    })
}

/// Parses the snapshot schema. Errors carry the 1-based input line.
pub fn parse_snapshots<R: Read>(input: R, mode: ParseMode) -> Result<ParseOutcome, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| TraceError::Io(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != SNAPSHOT_HEADER {
        return Err(TraceError::BadHeader {
            expected: SNAPSHOT_HEADER.join(","),
        });
    }
    let mut out = ParseOutcome::default();
    for row in reader.records() {
        let parsed = match row {
            Ok(r) => parse_row(&r),
            Err(e) => Err(TraceError::Malformed {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            }),
        };
        match (parsed, mode) {
            (Ok(r), _) => out.records.push(r),
            (Err(e), ParseMode::Strict) => return Err(e),
            (Err(e), ParseMode::Lenient) => out.rejected.push(e),
        }
    }
    Ok(out)
}

pub fn parse_snapshots_str(text: &str, mode: ParseMode) -> Result<ParseOutcome, TraceError> {
    parse_snapshots(text.as_bytes(), mode)
}

/// Serializes records in the snapshot schema.
pub fn write_snapshots(records: &[SnapshotRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SNAPSHOT_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.machine_id.clone(),
            r.timestamp.to_string(),
            r.used.to_string(),
            r.capacity.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

/// How snapshots are reduced to the samples the CDF is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean utilization per machine.
    #[default]
    Mean,
    /// Peak utilization per machine.
    Max,
    /// Every snapshot counts on its own.
    PerSnapshot,
}

/// Per-machine utilization samples under `aggregation`.
pub fn utilization_samples(records: &[SnapshotRecord], aggregation: Aggregation) -> Vec<f64> {
    if aggregation == Aggregation::PerSnapshot {
        return records.iter().map(SnapshotRecord::utilization).collect();
    }
    let mut per_machine: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let u = r.utilization();
        let e = per_machine.entry(&r.machine_id).or_insert((0.0, 0.0, 0));
        e.0 += u;
        e.1 = e.1.max(u);
        e.2 += 1;
    }
    per_machine
        .values()
        .map(|&(sum, max, n)| match aggregation {
            Aggregation::Max => max,
            _ => sum / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationCdf {
    /// `(utilization, cumulative fraction)` at `resolution + 1` grid points.
    pub points: Vec<(f64, f64)>,
    samples: Vec<f64>,
}

/// Tolerance when comparing a sample with a grid point.
const GRID_EPS: f64 = 1e-9;

impl UtilizationCdf {
    /// Fraction of samples at or below `u`.
    pub fn cdf_at(&self, u: f64) -> f64 {
        let n = self.samples.partition_point(|&s| s <= u + GRID_EPS);
        n as f64 / self.samples.len() as f64
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("utilization,cumulative_fraction\n");
        for (u, c) in &self.points {
            out.push_str(&format!("{u},{c}\n"));
        }
        out
    }
}

pub fn compute_cdf(records: &[SnapshotRecord], resolution: usize) -> Result<UtilizationCdf, TraceError> {
    compute_cdf_with(records, resolution, Aggregation::Mean)
}

/// Empirical CDF at utilizations `j / resolution`, `j = 0..=resolution`.
pub fn compute_cdf_with(
    records: &[SnapshotRecord],
    resolution: usize,
    aggregation: Aggregation,
) -> Result<UtilizationCdf, TraceError> {
    if records.is_empty() {
        return Err(TraceError::Empty);
    }
    if resolution == 0 {
        return Err(TraceError::ZeroResolution);
    }
    let mut samples = utilization_samples(records, aggregation);
    samples.sort_by(f64::total_cmp);
    let mut cdf = UtilizationCdf {
        points: Vec::with_capacity(resolution + 1),
        samples,
    };
    for j in 0..=resolution {
        let u = j as f64 / resolution as f64;
        let c = cdf.cdf_at(u);
        cdf.points.push((u, c));
    }
    Ok(cdf)
}

/// Parses a two-column `utilization,cumulative_fraction` table.
pub fn parse_cdf_table(text: &str) -> Result<Vec<(f64, f64)>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<(f64, f64)>() {
        out.push(row.map_err(|e| TraceError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Inverse of the target machine-utilization CDF: piecewise linear through
/// (0, 0), (0.68, 0.20), (0.87, 0.50) and (1, 1) in (fraction, utilization).
pub fn anchor_quantile(q: f64) -> f64 {
    const KNOTS: [(f64, f64); 4] = [(0.0, 0.0), (0.68, 0.20), (0.87, 0.50), (1.0, 1.0)];
    let q = q.clamp(0.0, 1.0);
    for w in KNOTS.windows(2) {
        let ((q0, u0), (q1, u1)) = (w[0], w[1]);
        if q <= q1 {
            return u0 + (q - q0) / (q1 - q0) * (u1 - u0);
        }
    }
    1.0
}

/// Synthetic cluster whose per-machine mean utilizations follow
/// [`anchor_quantile`]. Machine `i` draws its quantile inside stratum
/// `[i/n, (i+1)/n)`, so the empirical CDF stays within `1/n` of the target.
/// Each machine gets `snapshots` readings spread symmetrically around its
/// mean.
pub fn synthetic_population(machines: usize, snapshots: usize, seed: u64) -> Vec<SnapshotRecord> {
    const CAPACITY: u64 = 80 << 30;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snapshots = snapshots.max(1);
    let mut out = Vec::with_capacity(machines * snapshots);
    for i in 0..machines {
        let q = (i as f64 + rng.random::<f64>()) / machines as f64;
        let mean = anchor_quantile(q);
        let spread = 0.1 * mean.min(1.0 - mean);
        for k in 0..snapshots {
            // offsets sum to zero, so the mean is preserved
            let offset = if snapshots == 1 {
                0.0
            } else {
                spread * (2.0 * k as f64 / (snapshots - 1) as f64 - 1.0)
            };
            let u = (mean + offset).clamp(0.0, 1.0);
            out.push(SnapshotRecord {
                machine_id: format!("m-{i:04}"),
                timestamp: (k * 300) as f64,
                used: (u * CAPACITY as f64).round() as u64,
                capacity: CAPACITY,
            });
        }
    }
    out
}

/// Where an availability timeline came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AvailabilitySource {
    TraceDriven { machine_id: String, time_scale: f64 },
    MarkovOnOff { levels: Vec<u64>, mean_sojourns: Vec<f64> },
}

/// Piecewise-constant harvestable bytes of one peer device.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilityProcess {
    pub device: DeviceId,
    pub source: AvailabilitySource,
    /// `(start time, bytes)`, strictly increasing in time, first at 0.
    pub steps: Vec<(SimTime, u64)>,
    pub max_bytes: u64,
}

impl AvailabilityProcess {
    pub fn value_at(&self, t: SimTime) -> u64 {
        let i = self.steps.partition_point(|&(s, _)| s <= t);
        if i == 0 {
            self.steps.first().map_or(0, |s| s.1)
        } else {
            self.steps[i - 1].1
        }
    }

    /// Time-weighted fraction spent at each distinct level up to `horizon`.
    pub fn occupancy(&self, horizon: SimTime) -> BTreeMap<u64, f64> {
        let mut out = BTreeMap::new();
        for (i, &(start, bytes)) in self.steps.iter().enumerate() {
            if start >= horizon {
                break;
            }
            let end = self.steps.get(i + 1).map_or(horizon, |s| s.0.min(horizon));
            *out.entry(bytes).or_insert(0.0) += (end - start) / horizon;
        }
        out
    }

    /// Queues every step as a harvest-limit change on `runtime`, offset by
    /// the runtime's current time.
    pub fn schedule(&self, runtime: &mut Runtime) {
        let base = runtime.now();
        for &(t, bytes) in &self.steps {
            runtime.schedule_limit(base + t, self.device, bytes);
        }
    }
}

/// `capacity * (1 - used / machine_capacity) - reserved - headroom`, in
/// integer arithmetic, clamped to `[0, usable]`.
fn harvestable(spec: &DeviceSpec, used: u64, machine_capacity: u64) -> u64 {
    let idle = machine_capacity.saturating_sub(used) as u128;
    let free = (spec.capacity as u128 * idle / machine_capacity as u128) as u64;
    free.saturating_sub(spec.reserved + spec.headroom)
        .min(spec.usable())
}

/// Turns one machine's snapshots into an availability timeline for `device`.
/// `machine` defaults to the lexically first machine in `records`.
pub fn availability_from_trace(
    records: &[SnapshotRecord],
    machine: Option<&str>,
    device: &DeviceSpec,
    time_scale: f64,
) -> Result<AvailabilityProcess, TraceError> {
    if !(time_scale > 0.0 && time_scale.is_finite()) {
        return Err(TraceError::InvalidProcess(format!(
            "time scale {time_scale} must be positive"
        )));
    }
    let machine_id = match machine {
        Some(m) => m.to_string(),
        None => records
            .iter()
            .map(|r| r.machine_id.as_str())
            .min()
            .ok_or(TraceError::Empty)?
            .to_string(),
    };
    let mut rows: Vec<&SnapshotRecord> =
        records.iter().filter(|r| r.machine_id == machine_id).collect();
    if rows.is_empty() {
        return Err(TraceError::UnknownMachine(machine_id));
    }
    rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let t0 = rows[0].timestamp;
    let mut steps: Vec<(SimTime, u64)> = Vec::new();
    for r in rows {
        let t = (r.timestamp - t0) * time_scale;
        let bytes = harvestable(device, r.used, r.capacity);
        match steps.last_mut() {
            Some(last) if last.0 == t => last.1 = bytes,
            Some(last) if last.1 == bytes => {}
            _ => steps.push((t, bytes)),
        }
    }
    Ok(AvailabilityProcess {
        device: device.device_id,
        source: AvailabilitySource::TraceDriven {
            machine_id,
            time_scale,
        },
        steps,
        max_bytes: device.usable(),
    })
}

/// Continuous-time Markov chain over `levels`: the chain stays at level `i`
/// for an exponential time with mean `mean_sojourns[i]`, then jumps to one
/// of the other levels uniformly. Levels above the device's usable bytes
/// are clamped.
pub fn markov_availability(
    device: &DeviceSpec,
    levels: &[u64],
    mean_sojourns: &[f64],
    horizon: SimTime,
    seed: u64,
) -> Result<AvailabilityProcess, TraceError> {
    if levels.is_empty() || levels.len() != mean_sojourns.len() {
        return Err(TraceError::InvalidProcess(
            "levels and mean_sojourns must be non-empty and of equal length".into(),
        ));
    }
    if mean_sojourns.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(TraceError::InvalidProcess("sojourn means must be positive".into()));
    }
    let usable = device.usable();
    let clamp = |b: u64| b.min(usable);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0usize;
    let mut t = 0.0;
    let mut steps = vec![(0.0, clamp(levels[0]))];
    if levels.len() > 1 {
        loop {
            let exp = Exp::new(1.0 / mean_sojourns[state]).expect("positive rate");
            t += exp.sample(&mut rng);
            if t >= horizon {
                break;
            }
            let pick = rng.random_range(0..levels.len() - 1);
            state = if pick >= state { pick + 1 } else { pick };
            steps.push((t, clamp(levels[state])));
        }
    }
    Ok(AvailabilityProcess {
        device: device.device_id,
        source: AvailabilitySource::MarkovOnOff {
            levels: levels.to_vec(),
            mean_sojourns: mean_sojourns.to_vec(),
        },
        steps,
        max_bytes: usable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_quantile_hits_knots() {
        assert_eq!(anchor_quantile(0.0), 0.0);
        assert!((anchor_quantile(0.68) - 0.20).abs() < 1e-12);
        assert!((anchor_quantile(0.87) - 0.50).abs() < 1e-12);
        assert_eq!(anchor_quantile(1.0), 1.0);
    }

    #[test]
    fn harvestable_clamps() {
        let spec = DeviceSpec::new(1, crate::Tier::PeerHbm, 100).with_reserved(10);
        assert_eq!(harvestable(&spec, 0, 20), 90);
        assert_eq!(harvestable(&spec, 19, 20), 0);
        assert_eq!(harvestable(&spec, 20, 20), 0);
    }
}
