use harvest_sim::interconnect::LinkParams;
use harvest_sim::kv_sim::*;
use harvest_sim::memalloc::DeviceId;
use harvest_sim::profiles::{kv_model, three_device_topology, CalibrationProfile, LinkPair};
use harvest_sim::runtime::{
    audit::check_log, Durability, LogKind, PolicyKind, RevocationChaos, RevokeReason, Runtime,
};
use harvest_sim::GIB;

const BPE: u64 = 1000;
const SLOT: u64 = 16 * BPE;

fn small_model() -> KvModelSpec {
    KvModelSpec {
        name: "small".into(),
        bytes_per_entry: BPE,
        recompute_time_per_entry: 1e-3,
    }
}

fn links() -> LinkPair {
    CalibrationProfile::paper_h100().kv_links
}

fn runtime(peer_bytes: u64) -> Runtime {
    let topo = three_device_topology(80 * GIB, peer_bytes.max(1), 640 * GIB, &links()).unwrap();
    let mut rt = Runtime::new(topo, PolicyKind::BestFit).unwrap();
    if peer_bytes == 0 {
        rt.set_harvest_limit(DeviceId(1), 0).unwrap();
    }
    rt
}

fn cache(rt: &Runtime, local_slots: u64, order: EvictionOrder) -> KvCache {
    let config = KvConfig {
        block_size: 16,
        policy: OffloadPolicy {
            order,
            watermark: 1.0,
        },
        local_budget: local_slots * SLOT,
        host_budget: 1000 * SLOT,
    };
    KvCache::new(small_model(), config, rt.topology()).unwrap()
}

fn host_writes(rt: &Runtime) -> usize {
    rt.log()
        .iter()
        .filter(|r| matches!(r.kind, LogKind::TransferIssued { dst: DeviceId(2), .. }))
        .count()
}

#[test]
fn sixteen_tokens_fill_one_block() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::Lru);
    kv.append_kv(&mut rt, 0, 16).unwrap();
    let blocks = kv.sequence_blocks(0).to_vec();
    assert_eq!(blocks.len(), 1);
    assert_eq!(kv.block(blocks[0]).unwrap().block.entries, 16);
}

#[test]
fn seventeen_tokens_spill_into_a_second_block() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::Lru);
    kv.append_kv(&mut rt, 0, 10).unwrap();
    kv.append_kv(&mut rt, 0, 7).unwrap();
    let entries: Vec<u32> = kv
        .sequence_blocks(0)
        .iter()
        .map(|id| kv.block(*id).unwrap().block.entries)
        .collect();
    assert_eq!(entries, vec![16, 1]);
    assert!(kv.append_kv(&mut rt, 0, 0).is_err());
}

#[test]
fn exceeding_the_watermark_evicts() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 4, EvictionOrder::Lru);
    let mut evicted = 0;
    for _ in 0..6 {
        let events = kv.append_kv(&mut rt, 0, 16).unwrap();
        evicted += events
            .iter()
            .filter(|e| matches!(e, KvEvent::Evicted { .. }))
            .count();
    }
    assert_eq!(evicted, 2);
    assert!(kv.local_bytes() <= 4 * SLOT);
    kv.check_invariants(&rt).unwrap();
}

#[test]
fn lossy_evictions_with_peer_space_never_touch_host() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 2, EvictionOrder::Lru);
    for _ in 0..10 {
        kv.append_kv(&mut rt, 0, 16).unwrap();
    }
    assert!(kv.events().iter().all(|e| matches!(
        e,
        KvEvent::Evicted {
            to: KvTier::PeerHbm,
            ..
        }
    )));
    assert_eq!(host_writes(&rt), 0);
    assert_eq!(kv.host_bytes(), 0);
}

#[test]
fn without_peer_capacity_evictions_go_to_host() {
    let mut rt = runtime(0);
    let mut kv = cache(&rt, 2, EvictionOrder::Lru);
    for _ in 0..10 {
        kv.append_kv(&mut rt, 0, 16).unwrap();
    }
    let evictions = kv.events().len();
    assert_eq!(evictions, 8);
    assert!(kv.events().iter().all(|e| matches!(
        e,
        KvEvent::Evicted {
            to: KvTier::HostDram,
            ..
        }
    )));
    assert_eq!(host_writes(&rt), evictions);
}

fn evicted_ids(events: &[KvEvent]) -> Vec<u64> {
    events
        .iter()
        .filter_map(|e| match e {
            KvEvent::Evicted { block, .. } => Some(*block),
            _ => None,
        })
        .collect()
}

#[test]
fn lru_evicts_the_two_oldest_accesses() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::Lru);
    for (seq, t) in [(0, 1.0), (1, 2.0), (2, 3.0)] {
        rt.advance_to(t).unwrap();
        kv.append_kv(&mut rt, seq, 16).unwrap();
    }
    // touching seq 0 makes seq 1 and 2 the oldest
    rt.advance_to(4.0).unwrap();
    let first = kv.sequence_blocks(0)[0];
    kv.access(&mut rt, first).unwrap();
    let events = kv.evict(&mut rt, 2 * SLOT, None).unwrap();
    let want: Vec<u64> = [1, 2].iter().map(|&s| kv.sequence_blocks(s)[0]).collect();
    assert_eq!(evicted_ids(&events), want);
}

#[test]
fn fifo_and_sequence_tail_orders() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::Fifo);
    kv.append_kv(&mut rt, 0, 32).unwrap();
    kv.append_kv(&mut rt, 1, 32).unwrap();
    let first = kv.sequence_blocks(0)[0];
    kv.access(&mut rt, first).unwrap();
    let events = kv.evict(&mut rt, SLOT, None).unwrap();
    assert_eq!(evicted_ids(&events), vec![first]);

    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::SequenceTail);
    kv.append_kv(&mut rt, 0, 32).unwrap();
    kv.append_kv(&mut rt, 1, 32).unwrap();
    let events = kv.evict(&mut rt, 2 * SLOT, None).unwrap();
    let s1 = kv.sequence_blocks(1).to_vec();
    assert_eq!(evicted_ids(&events), vec![s1[1], s1[0]]);
}

#[test]
fn partial_tail_blocks_are_not_evicted() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::Lru);
    kv.append_kv(&mut rt, 0, 8).unwrap();
    assert!(kv.evict(&mut rt, SLOT, None).unwrap().is_empty());
}

fn one_evicted_block(peer_bytes: u64, durability: Durability) -> (Runtime, KvCache, u64) {
    let mut rt = runtime(peer_bytes);
    let mut kv = cache(&rt, 8, EvictionOrder::Lru);
    kv.set_durability(0, durability);
    kv.append_kv(&mut rt, 0, 16).unwrap();
    let id = kv.sequence_blocks(0)[0];
    kv.evict(&mut rt, SLOT, None).unwrap();
    rt.run_until_idle();
    (rt, kv, id)
}

#[test]
fn peer_reload_costs_one_peer_transfer() {
    let (mut rt, mut kv, id) = one_evicted_block(GIB, Durability::Lossy);
    assert_eq!(kv.block(id).unwrap().tier, KvTier::PeerHbm);
    let original = kv.block(id).unwrap().block.content_hash;
    let a = kv.reload(&mut rt, id).unwrap();
    assert_eq!(a.source, KvTier::PeerHbm);
    assert_eq!(a.content, original);
    let expect = links().peer.transfer_time(16 * BPE);
    assert!((a.ready_at - rt.now() - expect).abs() < 1e-15);
    assert_eq!(kv.block(id).unwrap().tier, KvTier::LocalHbm);
    rt.run_until_idle();
    assert!(rt.live_handles().is_empty());
}

#[test]
fn host_reload_costs_one_host_transfer() {
    let (mut rt, mut kv, id) = one_evicted_block(0, Durability::Lossy);
    assert_eq!(kv.block(id).unwrap().tier, KvTier::HostDram);
    let before = rt.log().len();
    let a = kv.reload(&mut rt, id).unwrap();
    assert_eq!(a.source, KvTier::HostDram);
    let issued: Vec<_> = rt.log()[before..]
        .iter()
        .filter_map(|r| match r.kind {
            LogKind::TransferIssued { src, dst, .. } => Some((src, dst)),
            _ => None,
        })
        .collect();
    assert_eq!(issued, vec![(DeviceId(2), DeviceId(0))]);
    // a lossy host copy is dropped once the block is back
    assert_eq!(kv.host_bytes(), 0);
}

#[test]
fn backed_block_revoked_during_reload_still_arrives_intact() {
    let (mut rt, mut kv, id) = one_evicted_block(GIB, Durability::Backed);
    let original = kv.block(id).unwrap().block.content_hash;
    let handle = kv.block(id).unwrap().handle.unwrap();
    let a = kv.reload(&mut rt, id).unwrap();
    // revoke while the peer-to-local copy is in flight
    rt.revoke(handle, RevokeReason::Pressure);
    rt.run_until_idle();
    assert_eq!(a.content, original);
    assert!(check_log(rt.log()).is_empty());
}

#[test]
fn backed_block_revoked_before_issue_falls_back_to_host() {
    let (mut rt, mut kv, id) = one_evicted_block(GIB, Durability::Backed);
    let original = kv.block(id).unwrap().block.content_hash;
    let handle = kv.block(id).unwrap().handle.unwrap();
    let step = 1e-9;
    let t0 = rt.now();
    rt.revoke(handle, RevokeReason::Pressure);
    // invalidated but the notice has not been delivered yet
    rt.advance_to(t0 + 1.5 * step).unwrap();
    assert!(!rt.is_live(&handle));
    assert_eq!(kv.block(id).unwrap().tier, KvTier::PeerHbm);
    let a = kv.reload(&mut rt, id).unwrap();
    assert_eq!(a.source, KvTier::HostDram);
    assert_eq!(a.content, original);
    let host = links().host.transfer_time(16 * BPE);
    assert!(a.ready_at - t0 <= host + 3.0 * step + 1e-15);
    rt.run_until_idle();
    assert!(check_log(rt.log()).is_empty());
}

#[test]
fn lossy_block_revoked_on_peer_is_recomputed() {
    let (mut rt, mut kv, id) = one_evicted_block(GIB, Durability::Lossy);
    let original = kv.block(id).unwrap().block.content_hash;
    let handle = kv.block(id).unwrap().handle.unwrap();
    rt.revoke(handle, RevokeReason::ExternalReclaim);
    rt.run_until_idle();
    kv.absorb_revocations(&rt);
    assert_eq!(kv.block(id).unwrap().tier, KvTier::NotMaterialized);
    let a = kv.access(&mut rt, id).unwrap();
    assert_eq!(a.source, KvTier::NotMaterialized);
    assert_eq!(a.content, original);
    assert!(kv
        .events()
        .iter()
        .any(|e| matches!(e, KvEvent::Recomputed { block, .. } if *block == id)));
}

fn topo_with_host(host: LinkParams) -> harvest_sim::interconnect::Topology {
    let pair = LinkPair {
        peer: links().peer,
        host,
    };
    three_device_topology(80 * GIB, 80 * GIB, 640 * GIB, &pair).unwrap()
}

fn block(entries: u32, durability: Durability) -> KvBlock {
    KvBlock {
        block_id: 0,
        sequence_id: 0,
        index: 0,
        entries,
        durability,
        content_hash: KvBlock::true_hash(0, 0, entries),
    }
}

#[test]
fn fallback_with_free_recompute_always_recomputes() {
    let mut m = small_model();
    m.recompute_time_per_entry = 0.0;
    let topo = topo_with_host(links().host);
    for e in [1, 8, 16] {
        assert_eq!(
            resolve_fallback(&block(e, Durability::Backed), true, &m, &topo).unwrap(),
            FallbackPlan::Recompute
        );
    }
}

#[test]
fn fallback_with_instant_host_fetches() {
    let topo = topo_with_host(LinkParams::new(0.0, 1e30));
    assert_eq!(
        resolve_fallback(&block(16, Durability::Backed), true, &small_model(), &topo).unwrap(),
        FallbackPlan::FetchFromHost
    );
    // nothing to fetch without a host copy
    assert_eq!(
        resolve_fallback(&block(16, Durability::Lossy), false, &small_model(), &topo).unwrap(),
        FallbackPlan::Recompute
    );
}

#[test]
fn fallback_flips_at_the_crossover() {
    // alpha + e * bpe / B = e * r  =>  e* = alpha / (r - bpe / B)
    let host = LinkParams::new(100e-6, 1e9);
    let topo = topo_with_host(host);
    let mut m = small_model();
    m.recompute_time_per_entry = 11e-6;
    let per_entry = m.recompute_time_per_entry - BPE as f64 / host.bandwidth;
    let crossover = host.fixed_cost / per_entry;
    assert!((crossover - 10.0).abs() < 1e-9);
    let plan = |e| resolve_fallback(&block(e, Durability::Backed), true, &m, &topo).unwrap();
    assert_eq!(plan(9), FallbackPlan::Recompute);
    assert_eq!(plan(11), FallbackPlan::FetchFromHost);
}

#[test]
fn zero_entries_speedup_is_the_fixed_cost_ratio() {
    let topo = CalibrationProfile::paper_h100().kv_topology().unwrap();
    let rows = reload_latency_experiment(&[kv_model("kimi-k2").unwrap()], &[0], &topo).unwrap();
    let l = links();
    assert!((rows[0].speedup - l.host.fixed_cost / l.peer.fixed_cost).abs() < 1e-12);
}

#[test]
fn h100_profile_reload_speedups() {
    let topo = CalibrationProfile::paper_h100().kv_topology().unwrap();
    let models: Vec<KvModelSpec> = ["kimi-k2", "mistral-large-3", "deepseek-v3"]
        .iter()
        .map(|n| kv_model(n).unwrap())
        .collect();
    let rows = reload_latency_experiment(&models, &STANDARD_ENTRY_COUNTS, &topo).unwrap();
    assert_eq!(rows.len(), 18);
    for chunk in rows.chunks(6) {
        assert!(chunk.windows(2).all(|w| w[1].speedup >= w[0].speedup));
        assert!(chunk.iter().all(|r| r.peer_s < r.host_s));
    }
    let kimi = &rows[..6];
    assert!((5.0..=5.8).contains(&kimi[0].speedup));
    assert!((5.3..=6.0).contains(&kimi[5].speedup));
    let mistral = &rows[6..12];
    assert!((2.5..=3.5).contains(&mistral[0].speedup));
    assert!((5.2..=6.0).contains(&mistral[5].speedup));
}

#[test]
fn local_budget_too_small_is_tier_exhausted() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 1, EvictionOrder::Lru);
    kv.append_kv(&mut rt, 0, 8).unwrap();
    // the open tail cannot be evicted, so a second sequence does not fit
    assert!(matches!(
        kv.append_kv(&mut rt, 1, 8),
        Err(KvError::TierExhausted(_))
    ));
}

#[test]
fn backed_without_host_room_is_tier_exhausted() {
    let mut rt = runtime(GIB);
    let config = KvConfig {
        block_size: 16,
        policy: OffloadPolicy::default(),
        local_budget: 2 * SLOT,
        host_budget: 0,
    };
    let mut kv = KvCache::new(small_model(), config, rt.topology()).unwrap();
    kv.set_durability(0, Durability::Backed);
    kv.append_kv(&mut rt, 0, 32).unwrap();
    assert!(matches!(
        kv.append_kv(&mut rt, 0, 16),
        Err(KvError::TierExhausted(_))
    ));
}

#[test]
fn invalid_configs_rejected() {
    let rt = runtime(GIB);
    let mut config = KvConfig {
        block_size: 16,
        policy: OffloadPolicy {
            order: EvictionOrder::Lru,
            watermark: 0.0,
        },
        local_budget: SLOT,
        host_budget: SLOT,
    };
    assert!(KvCache::new(small_model(), config.clone(), rt.topology()).is_err());
    config.policy.watermark = 1.0;
    config.block_size = 0;
    assert!(KvCache::new(small_model(), config, rt.topology()).is_err());
    let mut m = small_model();
    m.bytes_per_entry = 0;
    assert!(m.validate().is_err());
}

fn workload(durability: Durability) -> KvWorkload {
    KvWorkload {
        sequences: 3,
        steps: 24,
        tokens_per_step: 3,
        step_time: 1e-3,
        durability,
    }
}

fn churned_run(seed: u64, peer_bytes: u64, chaos: bool, durability: Durability) -> KvRunMetrics {
    let mut rt = runtime(peer_bytes);
    let mut kv = cache(&rt, 4, EvictionOrder::Lru);
    if chaos {
        kv.chaos = Some(RevocationChaos::new(seed, 2e-4));
    }
    let m = run_workload(&mut kv, &mut rt, &workload(durability)).unwrap();
    rt.run_until_idle();
    kv.absorb_revocations(&rt);
    assert!(check_log(rt.log()).is_empty());
    rt.check_invariants().unwrap();
    kv.check_invariants(&rt).unwrap();
    m
}

#[test]
fn revocations_never_change_what_attention_reads() {
    for durability in [Durability::Lossy, Durability::Backed] {
        for seed in 0..5 {
            let baseline = churned_run(seed, 0, false, durability);
            let churned = churned_run(seed, GIB, true, durability);
            assert!(churned.revocations > 0, "{durability:?}");
            assert_eq!(baseline.digest, churned.digest, "{durability:?} seed {seed}");
            if durability == Durability::Lossy {
                assert!(churned.recomputes > 0);
            } else {
                assert_eq!(churned.recomputes, 0);
            }
        }
    }
}

#[test]
fn table_dump_is_line_oriented() {
    let mut rt = runtime(GIB);
    let mut kv = cache(&rt, 8, EvictionOrder::Lru);
    kv.append_kv(&mut rt, 4, 20).unwrap();
    let dump = kv.dump();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("block=1 seq=4 index=1 entries=4 tier=local"));
}
