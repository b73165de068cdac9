//! Aligned text summaries of a metrics directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::tables::*;

#[derive(Debug, Default)]
pub struct Report {
    pub text: String,
    pub warnings: Vec<String>,
    pub sections: usize,
}

/// Reads whichever per-seed tables exist under `dir`, averaging over seeds.
/// Unreadable tables are skipped with a warning.
pub fn build_report(dir: &Path) -> Report {
    let mut report = Report::default();
    let mut seeds: Vec<_> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seed-"))
            })
            .collect(),
        Err(e) => {
            report.warnings.push(format!("cannot read {}: {e}", dir.display()));
            Vec::new()
        }
    };
    seeds.sort_by_key(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        (name.trim_start_matches("seed-").parse::<u64>().ok(), name.to_string())
    });

    let mut sweep = Vec::new();
    let mut churn = Vec::new();
    let mut reload = Vec::new();
    let mut workload = Vec::new();
    for seed_dir in &seeds {
        let seed = seed_dir
            .file_name()
            .and_then(|n| n.to_str())
            .map_or("", |n| n.trim_start_matches("seed-"))
            .to_string();
        sweep.extend(load::<MoeSweepRow>(seed_dir, MOE_SWEEP, &mut report.warnings));
        reload.extend(load::<KvReloadRow>(seed_dir, KV_RELOAD, &mut report.warnings));
        for r in load::<MoeChurnRow>(seed_dir, MOE_CHURN, &mut report.warnings) {
            churn.push((seed.clone(), r));
        }
        for r in load::<KvWorkloadRow>(seed_dir, KV_WORKLOAD, &mut report.warnings) {
            workload.push((seed.clone(), r));
        }
    }

    sweep_sections(&sweep, &mut report);
    reload_sections(&reload, &mut report);
    if !churn.is_empty() {
        let mut t = Table::new(&["seed", "model", "tok/s", "revocations", "migrations", "baseline"]);
        for (seed, r) in &churn {
            t.row(vec![
                seed.clone(),
                r.model.clone(),
                format!("{:.1}", r.tokens_per_s),
                r.revocations.to_string(),
                r.migrations.to_string(),
                if r.matches_baseline { "match" } else { "DIFFERS" }.into(),
            ]);
        }
        report.section("MoE decode under revocation churn", &t);
    }
    if !workload.is_empty() {
        let mut t = Table::new(&["seed", "model", "durability", "time s", "peer", "host", "recompute", "revoked", "baseline"]);
        for (seed, r) in &workload {
            t.row(vec![
                seed.clone(),
                r.model.clone(),
                r.durability.clone(),
                format!("{:.6}", r.total_time_s),
                r.peer_reloads.to_string(),
                r.host_reloads.to_string(),
                r.recomputes.to_string(),
                r.revocations.to_string(),
                if r.matches_baseline { "match" } else { "DIFFERS" }.into(),
            ]);
        }
        report.section("KV decode under revocation churn", &t);
    }
    if report.sections == 0 {
        report.text.push_str("no metrics found\n");
    }
    report
}

fn load<T: for<'de> serde::Deserialize<'de>>(dir: &Path, name: &str, warnings: &mut Vec<String>) -> Vec<T> {
    let path = dir.join(name);
    let Ok(bytes) = std::fs::read(&path) else {
        return Vec::new();
    };
    from_csv::<T>(&bytes).unwrap_or_else(|e| {
        warnings.push(format!("skipping {}: {e}", path.display()));
        Vec::new()
    })
}

fn sweep_sections(rows: &[MoeSweepRow], report: &mut Report) {
    // model -> fraction -> tier -> throughputs over seeds
    let mut by_model: BTreeMap<&str, BTreeMap<u64, BTreeMap<&str, Vec<f64>>>> = BTreeMap::new();
    for r in rows {
        by_model
            .entry(&r.model)
            .or_default()
            .entry(r.fraction_pct.to_bits())
            .or_default()
            .entry(&r.tier)
            .or_default()
            .push(r.tokens_per_s);
    }
    for (model, fractions) in by_model {
        let mut cells: Vec<(f64, &BTreeMap<&str, Vec<f64>>)> =
            fractions.iter().map(|(b, t)| (f64::from_bits(*b), t)).collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut t = Table::new(&["offload %", "peer tok/s", "host tok/s", "peer/host"]);
        for (fraction, tiers) in cells {
            let peer = tiers.get("peer").map(|v| mean(v));
            let host = tiers.get("host").map(|v| mean(v));
            let ratio = match (peer, host) {
                (Some(p), Some(h)) if h > 0.0 => format!("{:.2}x", p / h),
                _ => "-".into(),
            };
            let fmt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.1}"));
            t.row(vec![format!("{fraction}"), fmt(peer), fmt(host), ratio]);
        }
        report.section(&format!("MoE offload sweep: {model}"), &t);
    }
}

fn reload_sections(rows: &[KvReloadRow], report: &mut Report) {
    let mut by_model: BTreeMap<&str, BTreeMap<u64, &KvReloadRow>> = BTreeMap::new();
    for r in rows {
        // reload latency is seed independent, so any seed's row will do
        by_model.entry(&r.model).or_default().insert(r.entries, r);
    }
    for (model, entries) in by_model {
        let mut t = Table::new(&["entries", "host us", "peer us", "speedup"]);
        for (e, r) in entries {
            t.row(vec![
                e.to_string(),
                format!("{:.1}", r.host_s * 1e6),
                format!("{:.1}", r.peer_s * 1e6),
                format!("{:.2}x", r.speedup),
            ]);
        }
        report.section(&format!("KV reload latency: {model}"), &t);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            let _ = writeln!(out, "  {}", cells.join("  "));
        }
        out
    }
}

impl Report {
    fn section(&mut self, title: &str, table: &Table) {
        if self.sections > 0 {
            self.text.push('\n');
        }
        let _ = writeln!(self.text, "{title}");
        self.text.push_str(&table.render());
        self.sections += 1;
    }
}
