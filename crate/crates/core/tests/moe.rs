use harvest_sim::interconnect::LinkParams;
use harvest_sim::memalloc::{DeviceId, Tier};
use harvest_sim::moe_sim::*;
use harvest_sim::profiles::{moe_model, three_device_topology, CalibrationProfile, LinkPair};
use harvest_sim::runtime::{audit::check_log, PolicyKind, RevocationChaos, RevokeReason, Runtime};
use harvest_sim::GIB;

fn model(layers: u32, experts: u32, top_k: u32, size: u64, compute: f64) -> MoEModelSpec {
    MoEModelSpec {
        name: "test".into(),
        num_layers: layers,
        num_experts: experts,
        top_k,
        expert_size: size,
        compute_time_per_microbatch: compute,
    }
}

fn runtime_with(links: LinkPair, peer_bytes: u64) -> Runtime {
    let topo = three_device_topology(80 * GIB, peer_bytes.max(1), 640 * GIB, &links).unwrap();
    let mut rt = Runtime::new(topo, PolicyKind::BestFit).unwrap();
    if peer_bytes == 0 {
        rt.set_harvest_limit(DeviceId(1), 0).unwrap();
    }
    rt
}

fn h100_runtime() -> Runtime {
    let p = CalibrationProfile::paper_h100();
    Runtime::new(p.expert_topology().unwrap(), PolicyKind::BestFit).unwrap()
}

/// Inclusion probability of each rank when `k` ranks are drawn one at a
/// time, each draw proportional to the weights not yet taken.
fn inclusion_probabilities(weights: &[f64], k: usize) -> Vec<f64> {
    fn go(weights: &[f64], taken: &mut Vec<usize>, left: usize, prob: f64, out: &mut [f64]) {
        if left == 0 {
            for &r in taken.iter() {
                out[r] += prob;
            }
            return;
        }
        let rest: f64 = (0..weights.len())
            .filter(|r| !taken.contains(r))
            .map(|r| weights[r])
            .sum();
        for r in 0..weights.len() {
            if taken.contains(&r) {
                continue;
            }
            taken.push(r);
            go(weights, taken, left - 1, prob * weights[r] / rest, out);
            taken.pop();
        }
    }
    let mut out = vec![0.0; weights.len()];
    go(weights, &mut Vec::new(), k, 1.0, &mut out);
    out
}

fn frequencies(trace: &RoutingTrace, tokens: f64) -> Vec<f64> {
    let counts = trace.total_counts();
    counts.0[0].iter().map(|&c| c as f64 / tokens).collect()
}

#[test]
fn uniform_routing_at_zero_skew() {
    let m = model(1, 16, 2, 1, 1e-3);
    let p = PipelineConfig::new(1000, 100);
    let trace = generate_routing(&m, &p, 0.0, 0, 11).unwrap();
    let n = 100_000.0;
    let expect: f64 = 2.0 / 16.0;
    let sigma = (expect * (1.0 - expect) / n).sqrt();
    for f in frequencies(&trace, n) {
        assert!((f - expect).abs() <= 3.0 * sigma, "{f} vs {expect}");
    }
}

#[test]
fn skewed_routing_matches_analytic_sampling_distribution() {
    let m = model(1, 64, 4, 1, 1e-3);
    let p = PipelineConfig::new(1000, 100);
    let trace = generate_routing(&m, &p, 1.2, 0, 5).unwrap();
    let n = 100_000.0;
    let analytic = inclusion_probabilities(&zipf_weights(64, 1.2), 4);
    assert!((analytic.iter().sum::<f64>() - 4.0).abs() < 1e-9);
    let mut empirical = frequencies(&trace, n);
    empirical.sort_by(|a, b| b.total_cmp(a));
    assert!(empirical[0] > empirical[31]);
    for (rank, (e, a)) in empirical.iter().zip(&analytic).enumerate() {
        let sigma = (a * (1.0 - a) / n).sqrt();
        assert!((e - a).abs() <= 5.0 * sigma + 1e-3, "rank {rank}: {e} vs {a}");
    }
}

#[test]
fn drift_moves_the_hot_set() {
    let m = model(1, 32, 1, 1, 1e-3);
    let p = PipelineConfig::new(2000, 4);
    let hottest = |t: &RoutingTrace, range| {
        let c = t.activation_counts(range);
        *c.coldest_first(0).last().unwrap()
    };
    let fixed = generate_routing(&m, &p, 2.0, 0, 3).unwrap();
    assert_eq!(hottest(&fixed, 0..2), hottest(&fixed, 2..4));
    // with a drift every micro-batch some later window must differ
    let drifting = generate_routing(&m, &p, 2.0, 1, 3).unwrap();
    let hot: Vec<u32> = (0..4).map(|mb| hottest(&drifting, mb..mb + 1)).collect();
    assert!(hot.windows(2).any(|w| w[0] != w[1]), "{hot:?}");
}

#[test]
fn rebalance_without_peer_capacity_migrates_nothing() {
    let m = model(1, 8, 2, 1000, 1e-3);
    let mut rt = runtime_with(CalibrationProfile::paper_h100().expert_links, 0);
    let mut residency = ExpertResidency::initial(&m, 0);
    let counts = ActivationCounts(vec![vec![1; 8]]);
    let mut rb = Rebalancer::new();
    assert!(rb.rebalance(&m, &mut residency, &counts, &mut rt).unwrap().is_empty());
}

#[test]
fn rebalance_moves_the_two_hottest() {
    let m = model(1, 8, 2, 1000, 1e-3);
    let mut rt = runtime_with(CalibrationProfile::paper_h100().expert_links, 2000);
    let mut residency = ExpertResidency::initial(&m, 0);
    // replayed history: expert 3 and 7 dominate
    let trace = RoutingTrace::from_counts(
        8,
        vec![
            vec![vec![0, 1, 0, 5, 0, 0, 1, 4]],
            vec![vec![1, 0, 0, 4, 0, 2, 0, 6]],
        ],
    );
    let counts = trace.total_counts();
    let mut rb = Rebalancer::new();
    let moved = rb.rebalance(&m, &mut residency, &counts, &mut rt).unwrap();
    let keys: Vec<ExpertKey> = moved.iter().map(|mg| mg.key).collect();
    assert_eq!(keys, vec![ExpertKey::new(0, 7), ExpertKey::new(0, 3)]);
    // pending until the host-to-peer copies land
    assert_eq!(residency.count(Tier::PeerHbm), 0);
    rt.run_until_idle();
    residency.settle(rt.now());
    assert_eq!(residency.count(Tier::PeerHbm), 2);
    residency.verify(&m, &rt).unwrap();

    // revoking one sends it back to host DRAM
    rt.revoke(moved[0].handle, RevokeReason::Pressure);
    rt.run_until_idle();
    assert_eq!(rb.absorb_revocations(&mut residency), 1);
    assert_eq!(residency.get(ExpertKey::new(0, 7)).unwrap().tier, Tier::HostDram);
    assert_eq!(residency.get(ExpertKey::new(0, 3)).unwrap().tier, Tier::PeerHbm);
    residency.verify(&m, &rt).unwrap();
}

fn simple_links(peer_bw: f64, host_bw: f64) -> LinkPair {
    LinkPair {
        peer: LinkParams::new(0.0, peer_bw),
        host: LinkParams::new(0.0, host_bw),
    }
}

fn decode(
    m: &MoEModelSpec,
    p: &PipelineConfig,
    residency: &mut ExpertResidency,
    rt: &mut Runtime,
) -> DecodeMetrics {
    let trace = generate_routing(m, p, 1.0, 0, 1).unwrap();
    simulate_decode(m, p, &trace, residency, rt, &mut Rebalancer::new(), &DecodeOptions::default())
        .unwrap()
}

#[test]
fn all_local_runs_at_the_compute_ceiling() {
    let m = model(4, 8, 2, 1_000_000, 1e-3);
    let p = PipelineConfig::new(32, 6);
    let mut rt = runtime_with(simple_links(9e9, 1e9), 10 * GIB);
    let mut residency = ExpertResidency::initial(&m, 8);
    let d = decode(&m, &p, &mut residency, &mut rt);
    let ceiling = 32.0 / (4.0 * 1e-3);
    assert!((d.tokens_per_s - ceiling).abs() / ceiling < 1e-9);
    assert_eq!(d.fetch_stall_s, 0.0);
    assert_eq!(d.fetches, [0, 0, 0]);
}

#[test]
fn host_fetch_twice_compute_halves_throughput() {
    // one expert per layer so each stage fetches exactly one 2 ms expert
    let m = model(3, 1, 1, 2_000_000, 1e-3);
    let p = PipelineConfig::new(16, 5);
    let mut rt = runtime_with(simple_links(9e9, 1e9), 0);
    let mut residency = ExpertResidency::initial(&m, 0);
    let d = decode(&m, &p, &mut residency, &mut rt);
    let ceiling = 16.0 / (3.0 * 1e-3);
    assert!((d.tokens_per_s - ceiling / 2.0).abs() / ceiling < 1e-9, "{}", d.tokens_per_s);
    for lat in &d.microbatch_latency {
        assert!((lat - 3.0 * 2e-3).abs() < 1e-12);
    }
}

#[test]
fn peer_fetch_below_compute_reaches_the_ceiling() {
    let m = model(3, 1, 1, 2_000_000, 1e-3);
    let p = PipelineConfig::new(16, 5);
    let mut rt = runtime_with(simple_links(9e9, 1e9), 10 * GIB);
    let mut residency = ExpertResidency::initial(&m, 0);
    let mut rb = Rebalancer::new();
    let all: Vec<ExpertKey> = residency.iter().map(|(k, _)| *k).collect();
    rb.place(&m, &mut residency, all, &mut rt).unwrap();
    rt.run_until_idle();
    residency.settle(rt.now());
    assert_eq!(residency.count(Tier::PeerHbm), 3);
    let d = decode(&m, &p, &mut residency, &mut rt);
    let ceiling = 16.0 / (3.0 * 1e-3);
    assert!((d.tokens_per_s - ceiling).abs() / ceiling < 1e-9);
    assert_eq!(d.fetches_from(Tier::PeerHbm), 15);
    check_residency_safety(&d.uses).unwrap();
}

fn qwen_sweep(tier: Tier) -> Vec<SweepRow> {
    let m = moe_model("qwen2-moe").unwrap();
    let p = PipelineConfig::new(324, 14);
    let fractions: Vec<f64> = (0..=10).map(|i| i as f64 * 10.0).collect();
    let mk = || Ok(h100_runtime());
    offload_sweep(&m, &p, &fractions, tier, RoutingShape::default(), 7, &mk).unwrap()
}

#[test]
fn zero_offload_is_tier_independent() {
    let peer = qwen_sweep(Tier::PeerHbm);
    let host = qwen_sweep(Tier::HostDram);
    assert!((peer[0].tokens_per_s - host[0].tokens_per_s).abs() <= 1e-9 * host[0].tokens_per_s);
    // peer never loses to host when its link is faster at every size
    for (a, b) in peer.iter().zip(&host) {
        assert!(a.tokens_per_s >= b.tokens_per_s * (1.0 - 1e-12), "{a:?} {b:?}");
    }
}

#[test]
fn qwen_sweep_shapes() {
    let peer = qwen_sweep(Tier::PeerHbm);
    let first = peer[0].tokens_per_s;
    assert!((peer[10].tokens_per_s - first).abs() / first <= 0.05);
    let host = qwen_sweep(Tier::HostDram);
    assert!(host.windows(2).all(|w| w[1].tokens_per_s <= w[0].tokens_per_s));
    assert!(host[10].tokens_per_s <= 0.85 * host[0].tokens_per_s);
}

#[test]
fn invalid_fraction_rejected() {
    let m = moe_model("phi-tiny-moe").unwrap();
    let p = PipelineConfig::new(8, 2);
    let mk = || Ok(h100_runtime());
    let err = offload_sweep(&m, &p, &[120.0], Tier::HostDram, RoutingShape::default(), 0, &mk);
    assert_eq!(err.unwrap_err(), MoeError::InvalidFraction(120.0));
}

/// Few large experts with a small fan-out against many small experts with
/// a large fan-out; same bytes per layer, same links, same compute and the
/// same skew. Compute is short, so both are fetch bound.
#[test]
fn low_fan_out_gains_more_from_peer_memory() {
    let layer_bytes = 16 * 15_000_000;
    let low = model(8, 16, 2, layer_bytes / 16, 1e-4);
    let high = model(8, 64, 4, layer_bytes / 64, 1e-4);
    let p = PipelineConfig::new(64, 8);
    let links = CalibrationProfile::paper_h100().expert_links;
    let mk = || Ok(runtime_with(links, 80 * GIB));
    for seed in 0..5 {
        let shape = RoutingShape {
            skew: 1.2,
            drift_period: 0,
        };
        let speedup = |m: &MoEModelSpec| {
            let peer = offload_sweep(m, &p, &[50.0], Tier::PeerHbm, shape, seed, &mk).unwrap();
            let host = offload_sweep(m, &p, &[50.0], Tier::HostDram, shape, seed, &mk).unwrap();
            peer[0].tokens_per_s / host[0].tokens_per_s
        };
        let (a, b) = (speedup(&low), speedup(&high));
        assert!(a >= b, "seed {seed}: low fan-out {a} < high fan-out {b}");
    }
}

fn chaos_decode(seed: u64, peer_bytes: u64, chaos: bool) -> DecodeMetrics {
    let m = moe_model("phi-tiny-moe").unwrap();
    let mut p = PipelineConfig::new(64, 4);
    p.decode_steps = 2;
    let trace = generate_routing(&m, &p, 1.2, 3, seed).unwrap();
    let mut rt = runtime_with(CalibrationProfile::paper_h100().expert_links, peer_bytes);
    let mut residency = ExpertResidency::initial(&m, 4);
    let mut rb = if chaos {
        Rebalancer::with_chaos(RevocationChaos::new(seed ^ 0x5eed, 5e-3))
    } else {
        Rebalancer::new()
    };
    let options = DecodeOptions {
        rebalance_every: Some(16),
        history_window: 4,
    };
    let d = simulate_decode(&m, &p, &trace, &mut residency, &mut rt, &mut rb, &options).unwrap();
    rt.run_until_idle();
    assert!(check_log(rt.log()).is_empty());
    rt.check_invariants().unwrap();
    check_residency_safety(&d.uses).unwrap();
    d
}

#[test]
fn revocations_never_change_what_experts_compute() {
    for seed in 0..5 {
        let baseline = chaos_decode(seed, 0, false);
        let churned = chaos_decode(seed, 4 * GIB, true);
        assert!(churned.revocations_seen > 0);
        assert!(churned.migrations > 0);
        assert_eq!(baseline.output_digest, churned.output_digest, "seed {seed}");
    }
}

#[test]
fn decode_is_deterministic() {
    let a = chaos_decode(9, 4 * GIB, true);
    let b = chaos_decode(9, 4 * GIB, true);
    assert_eq!(a, b);
}

#[test]
fn trace_shorter_than_pipeline_is_rejected() {
    let m = model(2, 4, 1, 10, 1e-3);
    let trace = generate_routing(&m, &PipelineConfig::new(4, 2), 1.0, 0, 0).unwrap();
    let mut rt = h100_runtime();
    let err = simulate_decode(
        &m,
        &PipelineConfig::new(4, 3),
        &trace,
        &mut ExpertResidency::initial(&m, 0),
        &mut rt,
        &mut Rebalancer::new(),
        &DecodeOptions::default(),
    );
    assert!(matches!(err, Err(MoeError::TraceMismatch { .. })));
}
