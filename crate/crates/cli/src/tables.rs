//! Metrics tables and their on-disk layout.
//!
//! A run writes `seed-<n>/<table>.csv` for every seed and a `summary.csv`
//! aggregating numeric columns across seeds. Column names are part of the
//! output contract and are documented in the README.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MOE_SWEEP: &str = "moe_sweep.csv";
pub const MOE_CHURN: &str = "moe_churn.csv";
pub const KV_RELOAD: &str = "kv_reload.csv";
pub const KV_WORKLOAD: &str = "kv_workload.csv";
pub const SUMMARY: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeSweepRow {
    pub model: String,
    pub fraction_pct: f64,
    pub tier: String,
    pub tokens_per_s: f64,
    pub stall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeChurnRow {
    pub model: String,
    pub tokens_per_s: f64,
    pub revocations: u64,
    pub migrations: u64,
    pub fallbacks: u64,
    pub digest: String,
    pub baseline_digest: String,
    pub matches_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvReloadRow {
    pub model: String,
    pub entries: u64,
    pub host_s: f64,
    pub peer_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvWorkloadRow {
    pub model: String,
    pub durability: String,
    pub total_time_s: f64,
    pub peer_reloads: u64,
    pub host_reloads: u64,
    pub recomputes: u64,
    pub revocations: u64,
    pub digest: String,
    pub baseline_digest: String,
    pub matches_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub table: String,
    pub model: String,
    pub key: String,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Everything one seed produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedTables {
    pub moe_sweep: Vec<MoeSweepRow>,
    pub moe_churn: Vec<MoeChurnRow>,
    pub kv_reload: Vec<KvReloadRow>,
    pub kv_workload: Vec<KvWorkloadRow>,
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Output(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Output(e.to_string()))
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(bytes).deserialize().collect()
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial table.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

impl SeedTables {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fn put<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<(), CliError> {
            if rows.is_empty() {
                return Ok(());
            }
            write_atomic(&dir.join(name), &to_csv(rows)?)
        }
        put(dir, MOE_SWEEP, &self.moe_sweep)?;
        put(dir, MOE_CHURN, &self.moe_churn)?;
        put(dir, KV_RELOAD, &self.kv_reload)?;
        put(dir, KV_WORKLOAD, &self.kv_workload)
    }
}

#[derive(Default)]
struct Stats {
    n: usize,
    sum: f64,
    min: f64,
    max: f64,
}

impl Stats {
    fn add(&mut self, v: f64) {
        if self.n == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.n += 1;
        self.sum += v;
    }
}

/// Mean, min and max of every numeric metric across seeds, keyed by table,
/// model and row key. Ordering is deterministic.
pub fn summarize(per_seed: &[SeedTables]) -> Vec<SummaryRow> {
    let mut acc: BTreeMap<(String, String, String, String), Stats> = BTreeMap::new();
    let mut add = |table: &str, model: &str, key: String, metric: &str, v: f64| {
        acc.entry((table.into(), model.into(), key, metric.into()))
            .or_default()
            .add(v);
    };
    for t in per_seed {
        for r in &t.moe_sweep {
            let key = format!("fraction_pct={} tier={}", r.fraction_pct, r.tier);
            add("moe_sweep", &r.model, key.clone(), "tokens_per_s", r.tokens_per_s);
            add("moe_sweep", &r.model, key, "stall_s", r.stall_s);
        }
        for r in &t.moe_churn {
            add("moe_churn", &r.model, String::new(), "tokens_per_s", r.tokens_per_s);
            add("moe_churn", &r.model, String::new(), "revocations", r.revocations as f64);
            add("moe_churn", &r.model, String::new(), "migrations", r.migrations as f64);
            add("moe_churn", &r.model, String::new(), "fallbacks", r.fallbacks as f64);
        }
        for r in &t.kv_reload {
            let key = format!("entries={}", r.entries);
            add("kv_reload", &r.model, key.clone(), "host_s", r.host_s);
            add("kv_reload", &r.model, key.clone(), "peer_s", r.peer_s);
            add("kv_reload", &r.model, key, "speedup", r.speedup);
        }
        for r in &t.kv_workload {
            let key = format!("durability={}", r.durability);
            add("kv_workload", &r.model, key.clone(), "total_time_s", r.total_time_s);
            add("kv_workload", &r.model, key.clone(), "peer_reloads", r.peer_reloads as f64);
            add("kv_workload", &r.model, key.clone(), "host_reloads", r.host_reloads as f64);
            add("kv_workload", &r.model, key.clone(), "recomputes", r.recomputes as f64);
            add("kv_workload", &r.model, key, "revocations", r.revocations as f64);
        }
    }
    acc.into_iter()
        .map(|((table, model, key, metric), s)| SummaryRow {
            table,
            model,
            key,
            metric,
            seeds: s.n,
            mean: s.sum / s.n as f64,
            min: s.min,
            max: s.max,
        })
        .collect()
}
