//! Executes a resolved scenario seed by seed.

use std::path::{Path, PathBuf};

use harvest_sim::interconnect::Topology;
use harvest_sim::kv_sim::{
    reload_latency_experiment, run_workload, KvCache, KvConfig, KvError, KvModelSpec, KvRunMetrics,
    KvWorkload, OffloadPolicy,
};
use harvest_sim::moe_sim::{
    audit_runtime, check_residency_safety, generate_routing, offload_sweep, simulate_decode,
    DecodeMetrics, DecodeOptions, ExpertResidency, MoEModelSpec, MoeError, Rebalancer, RoutingShape,
};
use harvest_sim::runtime::{HarvestError, PolicyKind, RevocationChaos, Runtime};
use harvest_sim::traces::{
    availability_from_trace, markov_availability, parse_snapshots, AvailabilityProcess, ParseMode,
};
use harvest_sim::{DeviceId, DeviceSpec, Tier, GIB};

use crate::scenario::{AvailabilitySection, ChaosSection, KvWorkloadSection, Resolved};
use crate::tables::*;
use crate::CliError;

const PEER: DeviceId = DeviceId(1);
const CHAOS_SALT: u64 = 0x5eed_c4a0;

fn moe_error(model: &str, e: MoeError) -> CliError {
    match e {
        MoeError::Invariant(msg) => CliError::Invariant(format!("{model}: {msg}")),
        other => CliError::Config(format!("moe ({model}): {other}")),
    }
}

fn kv_error(model: &str, e: KvError) -> CliError {
    match e {
        KvError::Invariant(msg) => CliError::Invariant(format!("{model}: {msg}")),
        KvError::TierExhausted(bytes) => CliError::Config(format!(
            "kv.workload ({model}): no room for {bytes} bytes, raise local_blocks or host_blocks"
        )),
        other => CliError::Config(format!("kv ({model}): {other}")),
    }
}

fn runtime_error(e: HarvestError) -> CliError {
    CliError::Config(format!("topology: {e}"))
}

fn digest_hex(d: u64) -> String {
    format!("{d:016x}")
}

/// Peer capacity schedule for one seed, if the scenario has one.
pub fn availability(
    resolved: &Resolved,
    seed: u64,
    mode: ParseMode,
) -> Result<Option<AvailabilityProcess>, CliError> {
    let device = DeviceSpec::new(PEER.0, Tier::PeerHbm, resolved.profile.peer_capacity);
    let field = |e: harvest_sim::traces::TraceError| CliError::Config(format!("availability: {e}"));
    match &resolved.scenario.availability {
        None | Some(AvailabilitySection::Static) => Ok(None),
        Some(AvailabilitySection::Markov {
            levels_gib,
            mean_sojourns_s,
            horizon_s,
        }) => {
            let levels: Vec<u64> = levels_gib
                .iter()
                .map(|g| (g * GIB as f64).round() as u64)
                .collect();
            markov_availability(&device, &levels, mean_sojourns_s, *horizon_s, seed)
                .map(Some)
                .map_err(field)
        }
        Some(AvailabilitySection::Trace {
            path,
            machine,
            time_scale,
        }) => {
            let path = resolved.base_dir.join(path);
            let file = std::fs::File::open(&path).map_err(|e| {
                CliError::Config(format!("availability.path: cannot open {}: {e}", path.display()))
            })?;
            let outcome = parse_snapshots(file, mode).map_err(field)?;
            availability_from_trace(&outcome.records, machine.as_deref(), &device, *time_scale)
                .map(Some)
                .map_err(field)
        }
    }
}

fn make_runtime(
    topology: &Topology,
    availability: Option<&AvailabilityProcess>,
    peer_enabled: bool,
) -> Result<Runtime, HarvestError> {
    let mut rt = Runtime::new(topology.clone(), PolicyKind::BestFit)?;
    if peer_enabled {
        if let Some(a) = availability {
            a.schedule(&mut rt);
        }
    } else {
        rt.set_harvest_limit(PEER, 0)?;
    }
    Ok(rt)
}

fn chaos_for(chaos: &ChaosSection, seed: u64) -> RevocationChaos {
    let mut c = RevocationChaos::new(seed ^ CHAOS_SALT, chaos.mean_delay_s);
    c.coverage = chaos.coverage;
    c
}

/// Decodes with peer memory and churn, then again with no peer memory at
/// all; both runs are audited.
fn moe_churn(
    model: &MoEModelSpec,
    resolved: &Resolved,
    topology: &Topology,
    availability: Option<&AvailabilityProcess>,
    chaos: &ChaosSection,
    seed: u64,
) -> Result<MoeChurnRow, CliError> {
    let moe = resolved.scenario.moe.as_ref().expect("churn runs need a moe section");
    let pipeline = moe.pipeline.config();
    let trace = generate_routing(model, &pipeline, moe.skew, moe.drift_period, seed)
        .map_err(|e| moe_error(&model.name, e))?;
    let options = DecodeOptions {
        rebalance_every: Some(16),
        history_window: 4,
    };
    let decode = |peer: bool| -> Result<DecodeMetrics, CliError> {
        let mut rt = make_runtime(topology, availability, peer).map_err(runtime_error)?;
        let mut residency = ExpertResidency::initial(model, pipeline.local_cache_experts);
        let mut rebalancer = if peer {
            Rebalancer::with_chaos(chaos_for(chaos, seed))
        } else {
            Rebalancer::new()
        };
        let d = simulate_decode(model, &pipeline, &trace, &mut residency, &mut rt, &mut rebalancer, &options)
            .map_err(|e| moe_error(&model.name, e))?;
        rt.run_until_idle();
        audit_runtime(&rt).map_err(|e| moe_error(&model.name, e))?;
        check_residency_safety(&d.uses).map_err(|e| moe_error(&model.name, e))?;
        Ok(d)
    };
    let churned = decode(true)?;
    let baseline = decode(false)?;
    Ok(MoeChurnRow {
        model: model.name.clone(),
        tokens_per_s: churned.tokens_per_s,
        revocations: churned.revocations_seen as u64,
        migrations: churned.migrations as u64,
        fallbacks: churned.fallbacks,
        digest: digest_hex(churned.output_digest),
        baseline_digest: digest_hex(baseline.output_digest),
        matches_baseline: churned.output_digest == baseline.output_digest,
    })
}

#[allow(clippy::too_many_arguments)]
fn kv_run(
    model: &KvModelSpec,
    w: &KvWorkloadSection,
    durability: crate::scenario::DurabilityName,
    topology: &Topology,
    availability: Option<&AvailabilityProcess>,
    chaos: Option<&ChaosSection>,
    seed: u64,
    peer: bool,
) -> Result<KvRunMetrics, CliError> {
    let mut rt = make_runtime(topology, availability, peer).map_err(runtime_error)?;
    let slot = w.block_size as u64 * model.bytes_per_entry;
    let config = KvConfig {
        block_size: w.block_size,
        policy: OffloadPolicy {
            order: w.order,
            watermark: w.watermark,
        },
        local_budget: w.local_blocks * slot,
        host_budget: w.host_blocks * slot,
    };
    let mut cache =
        KvCache::new(model.clone(), config, rt.topology()).map_err(|e| kv_error(&model.name, e))?;
    if peer {
        cache.chaos = chaos.map(|c| chaos_for(c, seed));
    }
    let workload = KvWorkload {
        sequences: w.sequences,
        steps: w.steps,
        tokens_per_step: w.tokens_per_step,
        step_time: w.step_time_s,
        durability: durability.durability(),
    };
    let m = run_workload(&mut cache, &mut rt, &workload).map_err(|e| kv_error(&model.name, e))?;
    rt.run_until_idle();
    cache.absorb_revocations(&rt);
    audit_runtime(&rt).map_err(|e| moe_error(&model.name, e))?;
    cache
        .check_invariants(&rt)
        .map_err(|e| kv_error(&model.name, e))?;
    Ok(m)
}

/// Runs every experiment in the scenario for one seed.
pub fn simulate_seed(resolved: &Resolved, seed: u64, mode: ParseMode) -> Result<SeedTables, CliError> {
    let mut tables = SeedTables::default();
    let avail = availability(resolved, seed, mode)?;
    let chaos = resolved.scenario.chaos.as_ref();

    if let Some(moe) = &resolved.scenario.moe {
        let topology = resolved
            .profile
            .expert_topology()
            .map_err(|e| CliError::Config(format!("topology: {e}")))?;
        let mk = || make_runtime(&topology, avail.as_ref(), true);
        let shape = RoutingShape {
            skew: moe.skew,
            drift_period: moe.drift_period,
        };
        let pipeline = moe.pipeline.config();
        for model in &resolved.moe_models {
            for tier in &moe.tiers {
                let rows = offload_sweep(model, &pipeline, &moe.fractions_pct, tier.tier(), shape, seed, &mk)
                    .map_err(|e| moe_error(&model.name, e))?;
                tables.moe_sweep.extend(rows.into_iter().map(|r| MoeSweepRow {
                    model: model.name.clone(),
                    fraction_pct: r.fraction_pct,
                    tier: tier_name(r.tier).into(),
                    tokens_per_s: r.tokens_per_s,
                    stall_s: r.stall_s,
                }));
            }
            if let Some(c) = chaos {
                tables
                    .moe_churn
                    .push(moe_churn(model, resolved, &topology, avail.as_ref(), c, seed)?);
            }
        }
    }

    if let Some(kv) = &resolved.scenario.kv {
        let topology = resolved
            .profile
            .kv_topology()
            .map_err(|e| CliError::Config(format!("topology: {e}")))?;
        let rows = reload_latency_experiment(&resolved.kv_models, &kv.entry_counts, &topology)
            .map_err(|e| kv_error("kv.models", e))?;
        tables.kv_reload.extend(rows.into_iter().map(|r| KvReloadRow {
            model: r.model,
            entries: r.entries,
            host_s: r.host_s,
            peer_s: r.peer_s,
            speedup: r.speedup,
        }));
        if let Some(w) = &kv.workload {
            for model in &resolved.kv_models {
                for &d in &w.durability {
                    let run = |peer| kv_run(model, w, d, &topology, avail.as_ref(), chaos, seed, peer);
                    let churned = run(true)?;
                    let baseline = run(false)?;
                    tables.kv_workload.push(KvWorkloadRow {
                        model: model.name.clone(),
                        durability: d.as_str().into(),
                        total_time_s: churned.total_time,
                        peer_reloads: churned.peer_reloads,
                        host_reloads: churned.host_reloads,
                        recomputes: churned.recomputes,
                        revocations: churned.revocations,
                        digest: digest_hex(churned.digest),
                        baseline_digest: digest_hex(baseline.digest),
                        matches_baseline: churned.digest == baseline.digest,
                    });
                }
            }
        }
    }

    let diverged: Vec<String> = tables
        .moe_churn
        .iter()
        .filter(|r| !r.matches_baseline)
        .map(|r| format!("moe {}", r.model))
        .chain(
            tables
                .kv_workload
                .iter()
                .filter(|r| !r.matches_baseline)
                .map(|r| format!("kv {} ({})", r.model, r.durability)),
        )
        .collect();
    if !diverged.is_empty() {
        return Err(CliError::Invariant(format!(
            "seed {seed}: output differs from the no-peer baseline for {}",
            diverged.join(", ")
        )));
    }
    Ok(tables)
}

pub fn tier_name(tier: Tier) -> &'static str {
    match tier {
        Tier::LocalHbm => "local",
        Tier::PeerHbm => "peer",
        Tier::HostDram => "host",
    }
}

/// Where a run writes: the command-line directory wins over the scenario's.
pub fn output_dir(resolved: &Resolved, cli_out: Option<&Path>) -> Result<PathBuf, CliError> {
    match (cli_out, &resolved.scenario.output) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(resolved.base_dir.join(p)),
        (None, None) => Err(CliError::Config(
            "output: no output directory, set `output` or pass --out".into(),
        )),
    }
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub per_seed: Vec<(u64, SeedTables)>,
    pub summary: Vec<SummaryRow>,
}

/// Simulates every seed and writes `seed-<n>/` tables plus `summary.csv`.
pub fn run_scenario(resolved: &Resolved, out_dir: &Path, mode: ParseMode) -> Result<RunOutcome, CliError> {
    let mut per_seed = Vec::new();
    for &seed in &resolved.seeds {
        let tables = simulate_seed(resolved, seed, mode)?;
        tables.write(&out_dir.join(format!("seed-{seed}")))?;
        per_seed.push((seed, tables));
    }
    let all: Vec<SeedTables> = per_seed.iter().map(|(_, t)| t.clone()).collect();
    let summary = summarize(&all);
    write_atomic(&out_dir.join(SUMMARY), &to_csv(&summary)?)?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        per_seed,
        summary,
    })
}
