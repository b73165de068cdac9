//! Expert-offload workload: skewed top-k routing, an expert residency map, a
//! rebalancer that migrates hot experts into harvested peer memory, and a
//! micro-batch pipeline that overlaps expert fetches with computation.
//!
//! Pipeline model: stages run in order (decode step, layer, micro-batch).
//! Fetches for stage `s + 1` are issued when stage `s` starts, one stage of
//! lookahead. A stage ends at `max(start + compute, arrival of its
//! fetches)`. Fetched experts live in a per-stage staging buffer and are not
//! reused by later stages; only pinned local experts skip the fetch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{combine, digest, mix64, ContentHash};
use crate::memalloc::{DeviceId, Tier};
use crate::runtime::{
    AllocationHints, Durability, HarvestError, HarvestHandle, Mailbox, Place, RevocationChaos,
    Runtime,
};
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModelSpec {
    pub name: String,
    pub num_layers: u32,
    /// Experts per layer.
    pub num_experts: u32,
    pub top_k: u32,
    /// Bytes of one expert's weights in one layer.
    pub expert_size: u64,
    /// Seconds of GPU work for one micro-batch through one layer.
    pub compute_time_per_microbatch: f64,
}

impl MoEModelSpec {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.num_layers == 0 || self.num_experts == 0 {
            return Err(MoeError::InvalidModel(format!(
                "{}: layers and experts must be positive",
                self.name
            )));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::InvalidModel(format!(
                "{}: top_k {} outside 1..={}",
                self.name, self.top_k, self.num_experts
            )));
        }
        if self.expert_size == 0 {
            return Err(MoeError::InvalidModel(format!(
                "{}: expert_size must be positive",
                self.name
            )));
        }
        if !(self.compute_time_per_microbatch > 0.0 && self.compute_time_per_microbatch.is_finite()) {
            return Err(MoeError::InvalidModel(format!(
                "{}: compute time must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Content digest of an expert's weights.
    pub fn expert_hash(&self, key: ExpertKey) -> ContentHash {
        digest(&[0x6578_7065_7274, key.layer as u64, key.expert as u64, self.expert_size])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub microbatch_tokens: u32,
    pub num_microbatches: u32,
    /// Experts per layer pinned in local HBM at start (the lowest indices).
    pub local_cache_experts: u32,
    #[serde(default = "one")]
    pub decode_steps: u32,
}

fn one() -> u32 {
    1
}

impl PipelineConfig {
    pub fn new(microbatch_tokens: u32, num_microbatches: u32) -> Self {
        Self {
            microbatch_tokens,
            num_microbatches,
            local_cache_experts: 0,
            decode_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.microbatch_tokens == 0 || self.num_microbatches == 0 || self.decode_steps == 0 {
            return Err(MoeError::InvalidPipeline(
                "micro-batch size, micro-batch count and decode steps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_microbatches(&self) -> usize {
        (self.num_microbatches * self.decode_steps) as usize
    }

    pub fn total_tokens(&self) -> u64 {
        self.microbatch_tokens as u64 * self.total_microbatches() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MoeError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error("trace covers {have} micro-batches x {layers} layers, pipeline needs {need}")]
    TraceMismatch { have: usize, need: usize, layers: usize },
    #[error("skew must be finite and non-negative, got {0}")]
    InvalidSkew(f64),
    #[error("offload fraction {0} outside [0, 100]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Harvest(#[from] HarvestError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: u32,
    pub expert: u32,
}

impl ExpertKey {
    pub fn new(layer: u32, expert: u32) -> Self {
        Self { layer, expert }
    }

    fn tag(&self) -> u64 {
        ((self.layer as u64) << 32) | self.expert as u64
    }
}

/// Per micro-batch, per layer routing decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub num_layers: u32,
    pub num_experts: u32,
    /// `[micro-batch][layer]` -> tokens routed to each expert.
    token_counts: Vec<Vec<Vec<u32>>>,
}

impl RoutingTrace {
    pub fn from_counts(num_experts: u32, token_counts: Vec<Vec<Vec<u32>>>) -> Self {
        let num_layers = token_counts.first().map_or(0, |mb| mb.len() as u32);
        Self {
            num_layers,
            num_experts,
            token_counts,
        }
    }

    pub fn num_microbatches(&self) -> usize {
        self.token_counts.len()
    }

    /// Sorted experts that received at least one token.
    pub fn activated(&self, microbatch: usize, layer: u32) -> Vec<u32> {
        self.token_counts[microbatch][layer as usize]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(e, _)| e as u32)
            .collect()
    }

    pub fn token_counts(&self, microbatch: usize, layer: u32) -> &[u32] {
        &self.token_counts[microbatch][layer as usize]
    }

    /// Tokens per `(layer, expert)` over a range of micro-batches.
    pub fn activation_counts(&self, range: std::ops::Range<usize>) -> ActivationCounts {
        let mut counts = vec![vec![0u64; self.num_experts as usize]; self.num_layers as usize];
        for mb in &self.token_counts[range] {
            for (layer, per_expert) in mb.iter().enumerate() {
                for (e, &c) in per_expert.iter().enumerate() {
                    counts[layer][e] += c as u64;
                }
            }
        }
        ActivationCounts(counts)
    }

    pub fn total_counts(&self) -> ActivationCounts {
        self.activation_counts(0..self.num_microbatches())
    }
}

/// `[layer][expert]` token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationCounts(pub Vec<Vec<u64>>);

impl ActivationCounts {
    pub fn get(&self, key: ExpertKey) -> u64 {
        self.0[key.layer as usize][key.expert as usize]
    }

    /// Experts of `layer`, coldest first (ties by index).
    pub fn coldest_first(&self, layer: u32) -> Vec<u32> {
        let row = &self.0[layer as usize];
        let mut order: Vec<u32> = (0..row.len() as u32).collect();
        order.sort_by_key(|&e| (row[e as usize], e));
        order
    }
}

/// Zipf weights `1 / rank^skew` for ranks `1..=n`.
pub fn zipf_weights(n: u32, skew: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-skew)).collect()
}

/// Draws `k` distinct ranks, each successive draw proportional to the
/// remaining weights.
fn sample_without_replacement(rng: &mut ChaCha8Rng, cdf: &[f64], k: usize, out: &mut Vec<usize>) {
    out.clear();
    let n = cdf.len();
    if k >= n {
        out.extend(0..n);
        return;
    }
    let total = cdf[n - 1];
    while out.len() < k {
        let u = rng.random::<f64>() * total;
        let r = cdf.partition_point(|&c| c <= u).min(n - 1);
        // Rejecting repeats is the same as renormalizing over what is left.
        if !out.contains(&r) {
            out.push(r);
        }
    }
}

/// Synthetic routing: per token, `top_k` distinct experts drawn from a Zipf
/// ranking over experts. Every layer has its own ranking permutation, which
/// is redrawn every `drift_period` micro-batches (0 = never).
pub fn generate_routing(
    model: &MoEModelSpec,
    pipeline: &PipelineConfig,
    skew: f64,
    drift_period: u32,
    seed: u64,
) -> Result<RoutingTrace, MoeError> {
    model.validate()?;
    pipeline.validate()?;
    if !(skew >= 0.0 && skew.is_finite()) {
        return Err(MoeError::InvalidSkew(skew));
    }
    let n = model.num_experts as usize;
    let weights = zipf_weights(model.num_experts, skew);
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = Vec::with_capacity(model.top_k as usize);
    let mut perms: Vec<Option<(u64, Vec<usize>)>> = vec![None; model.num_layers as usize];
    let mut token_counts = Vec::with_capacity(pipeline.total_microbatches());
    for mb in 0..pipeline.total_microbatches() {
        let epoch = if drift_period == 0 {
            0
        } else {
            (mb / drift_period as usize) as u64
        };
        let mut layers = Vec::with_capacity(model.num_layers as usize);
        for (layer, slot) in perms.iter_mut().enumerate() {
            if !matches!(slot, Some((e, _)) if *e == epoch) {
                let mut p: Vec<usize> = (0..n).collect();
                let mut prng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64((layer as u64) << 32 | epoch)));
                p.shuffle(&mut prng);
                *slot = Some((epoch, p));
            }
            let perm = &slot.as_ref().expect("refreshed above").1;
            let mut counts = vec![0u32; n];
            for _ in 0..pipeline.microbatch_tokens {
                sample_without_replacement(&mut rng, &cdf, model.top_k as usize, &mut ranks);
                for &r in &ranks {
                    counts[perm[r]] += 1;
                }
            }
            layers.push(counts);
        }
        token_counts.push(layers);
    }
    Ok(RoutingTrace::from_counts(model.num_experts, token_counts))
}

/// Where one expert currently lives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residency {
    pub tier: Tier,
    /// Live peer handle when `tier` is `PeerHbm`.
    pub handle: Option<HarvestHandle>,
    /// Migration into peer memory that has not completed yet.
    pub pending: Option<(HarvestHandle, SimTime)>,
}

impl Residency {
    fn at(tier: Tier) -> Self {
        Self {
            tier,
            handle: None,
            pending: None,
        }
    }
}

/// Residency of every expert. Experts are backed objects: host DRAM always
/// keeps an authoritative copy, whatever `tier` says.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertResidency {
    entries: BTreeMap<ExpertKey, Residency>,
}

impl ExpertResidency {
    /// Every expert in host DRAM except the first `local_per_layer` of each
    /// layer, which are pinned locally.
    pub fn initial(model: &MoEModelSpec, local_per_layer: u32) -> Self {
        let mut entries = BTreeMap::new();
        for layer in 0..model.num_layers {
            for expert in 0..model.num_experts {
                let tier = if expert < local_per_layer {
                    Tier::LocalHbm
                } else {
                    Tier::HostDram
                };
                entries.insert(ExpertKey::new(layer, expert), Residency::at(tier));
            }
        }
        Self { entries }
    }

    /// The `fraction_pct` coldest experts of each layer (by `counts`) are
    /// left in host DRAM, the rest pinned locally.
    pub fn offloaded(model: &MoEModelSpec, counts: &ActivationCounts, fraction_pct: f64) -> Self {
        let per_layer = ((fraction_pct / 100.0) * model.num_experts as f64).round() as usize;
        let mut entries = BTreeMap::new();
        for layer in 0..model.num_layers {
            let order = counts.coldest_first(layer);
            for (i, &expert) in order.iter().enumerate() {
                let tier = if i < per_layer {
                    Tier::HostDram
                } else {
                    Tier::LocalHbm
                };
                entries.insert(ExpertKey::new(layer, expert), Residency::at(tier));
            }
        }
        Self { entries }
    }

    pub fn get(&self, key: ExpertKey) -> Option<&Residency> {
        self.entries.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ExpertKey, &Residency)> {
        self.entries.iter()
    }

    pub fn count(&self, tier: Tier) -> usize {
        self.entries.values().filter(|r| r.tier == tier).count()
    }

    /// Promotes migrations that completed by `now`.
    pub fn settle(&mut self, now: SimTime) {
        for r in self.entries.values_mut() {
            if let Some((h, ready)) = r.pending {
                if ready <= now {
                    r.tier = Tier::PeerHbm;
                    r.handle = Some(h);
                    r.pending = None;
                }
            }
        }
    }

    /// Reverts every expert whose peer handle was revoked to host DRAM.
    pub fn invalidate(&mut self, handle: &HarvestHandle) -> bool {
        let mut hit = false;
        for r in self.entries.values_mut() {
            if r.handle == Some(*handle) {
                r.tier = Tier::HostDram;
                r.handle = None;
                hit = true;
            }
            if r.pending.is_some_and(|(h, _)| h == *handle) {
                r.pending = None;
                hit = true;
            }
        }
        hit
    }

    /// Checks that peer entries hold live handles whose stored content is
    /// the expert's true content.
    pub fn verify(&self, model: &MoEModelSpec, runtime: &Runtime) -> Result<(), MoeError> {
        for (key, r) in &self.entries {
            if r.tier == Tier::PeerHbm {
                let h = r.handle.ok_or_else(|| {
                    MoeError::Invariant(format!("{key:?} on peer without a handle"))
                })?;
                let content = runtime.content(&h).map_err(|_| {
                    MoeError::Invariant(format!("{key:?} on peer with stale handle {h}"))
                })?;
                if content != Some(model.expert_hash(*key)) {
                    return Err(MoeError::Invariant(format!(
                        "{key:?} peer copy holds the wrong content"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One expert moved from host DRAM into peer memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Migration {
    pub key: ExpertKey,
    pub handle: HarvestHandle,
    pub ready_at: SimTime,
}

/// Moves hot host-resident experts into peer memory.
#[derive(Debug, Default)]
pub struct Rebalancer {
    mailbox: Mailbox,
    pub chaos: Option<RevocationChaos>,
}

impl Rebalancer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_chaos(chaos: RevocationChaos) -> Self {
        Self {
            mailbox: Mailbox::new(),
            chaos: Some(chaos),
        }
    }

    /// Applies pending revocation notices to `residency`.
    pub fn absorb_revocations(&self, residency: &mut ExpertResidency) -> usize {
        let notices = self.mailbox.drain();
        for n in &notices {
            residency.invalidate(&n.handle);
        }
        notices.len()
    }

    /// Migrates the hottest host-resident experts (by `counts`, ignoring
    /// never-activated ones) into peer memory until allocation fails.
    pub fn rebalance(
        &mut self,
        model: &MoEModelSpec,
        residency: &mut ExpertResidency,
        counts: &ActivationCounts,
        runtime: &mut Runtime,
    ) -> Result<Vec<Migration>, MoeError> {
        let mut candidates: Vec<(u64, ExpertKey)> = residency
            .entries
            .iter()
            .filter(|(_, r)| r.tier == Tier::HostDram && r.pending.is_none())
            .map(|(k, _)| (counts.get(*k), *k))
            .filter(|(c, _)| *c > 0)
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        self.place(model, residency, candidates.into_iter().map(|(_, k)| k), runtime)
    }

    /// Tries to move each listed host-resident expert into peer memory, in
    /// order, stopping at the first allocation failure.
    pub fn place(
        &mut self,
        model: &MoEModelSpec,
        residency: &mut ExpertResidency,
        keys: impl IntoIterator<Item = ExpertKey>,
        runtime: &mut Runtime,
    ) -> Result<Vec<Migration>, MoeError> {
        let host = host_device(runtime)?;
        let mut migrations = Vec::new();
        for key in keys {
            let hints = AllocationHints::new(Durability::Backed, key.tag());
            let handle = match runtime.harvest_alloc(model.expert_size, &hints) {
                Ok(h) => h,
                Err(HarvestError::NoCapacity(_)) | Err(HarvestError::NoPeers) => break,
                Err(e) => return Err(e.into()),
            };
            runtime.harvest_register_cb(handle, self.mailbox.callback())?;
            let ticket = runtime.copy(
                Place::Device(host),
                Place::Harvested(handle),
                model.expert_size,
                Some(model.expert_hash(key)),
            )?;
            if let Some(chaos) = self.chaos.as_mut() {
                chaos.on_alloc(runtime, handle);
            }
            let entry = residency.entries.get_mut(&key).expect("known expert");
            entry.pending = Some((handle, ticket.completion_time));
            migrations.push(Migration {
                key,
                handle,
                ready_at: ticket.completion_time,
            });
        }
        Ok(migrations)
    }
}

fn host_device(runtime: &Runtime) -> Result<DeviceId, MoeError> {
    runtime
        .topology()
        .host_device()
        .ok_or_else(|| MoeError::Invariant("topology has no host device".into()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeOptions {
    /// Re-run the rebalancer every this many stages (None = never).
    pub rebalance_every: Option<usize>,
    /// Micro-batches of history the rebalancer ranks by.
    pub history_window: usize,
}

/// A stage-level record for post-hoc safety checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertUse {
    pub key: ExpertKey,
    pub microbatch: usize,
    /// When the expert's weights were resident locally.
    pub ready_at: SimTime,
    /// When the feed-forward for this stage started.
    pub used_at: SimTime,
    pub source: Tier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeMetrics {
    pub tokens_per_s: f64,
    pub total_time: f64,
    /// Summed over layers, one entry per micro-batch of the trace.
    pub microbatch_latency: Vec<f64>,
    /// Stage time spent waiting for fetches beyond the compute time.
    pub fetch_stall_s: f64,
    pub fetches: [u64; 3],
    pub fallbacks: u64,
    pub revocations_seen: usize,
    pub migrations: usize,
    /// Digest over every stage's expert contents, in execution order.
    pub output_digest: ContentHash,
    pub uses: Vec<ExpertUse>,
}

impl DecodeMetrics {
    pub fn fetches_from(&self, tier: Tier) -> u64 {
        self.fetches[tier_index(tier)]
    }
}

fn tier_index(t: Tier) -> usize {
    match t {
        Tier::LocalHbm => 0,
        Tier::PeerHbm => 1,
        Tier::HostDram => 2,
    }
}

struct StageFetch {
    arrival: SimTime,
    items: Vec<(ExpertKey, SimTime, ContentHash, Tier)>,
}

/// Runs the pipelined decode for `trace` and reports throughput.
pub fn simulate_decode(
    model: &MoEModelSpec,
    pipeline: &PipelineConfig,
    trace: &RoutingTrace,
    residency: &mut ExpertResidency,
    runtime: &mut Runtime,
    rebalancer: &mut Rebalancer,
    options: &DecodeOptions,
) -> Result<DecodeMetrics, MoeError> {
    model.validate()?;
    pipeline.validate()?;
    let need = pipeline.total_microbatches();
    if trace.num_microbatches() < need || trace.num_layers != model.num_layers {
        return Err(MoeError::TraceMismatch {
            have: trace.num_microbatches(),
            need,
            layers: trace.num_layers as usize,
        });
    }
    let local = runtime.topology().local_device();
    let host = host_device(runtime)?;
    let b = pipeline.num_microbatches as usize;
    let layers = model.num_layers as usize;
    let steps = pipeline.decode_steps as usize;
    let stage_of = |s: usize| {
        let step = s / (layers * b);
        let rem = s % (layers * b);
        let layer = rem / b;
        let mb = rem % b;
        (step * b + mb, layer as u32)
    };
    let total_stages = steps * layers * b;
    let compute = model.compute_time_per_microbatch;

    let start = runtime.now();
    let mut metrics = DecodeMetrics {
        tokens_per_s: 0.0,
        total_time: 0.0,
        microbatch_latency: vec![0.0; need],
        fetch_stall_s: 0.0,
        fetches: [0; 3],
        fallbacks: 0,
        revocations_seen: 0,
        migrations: 0,
        output_digest: 0,
        uses: Vec::new(),
    };

    let issue = |s: usize,
                     residency: &mut ExpertResidency,
                     runtime: &mut Runtime,
                     metrics: &mut DecodeMetrics|
     -> Result<StageFetch, MoeError> {
        let (mb, layer) = stage_of(s);
        let now = runtime.now();
        let mut fetch = StageFetch {
            arrival: now,
            items: Vec::new(),
        };
        for expert in trace.activated(mb, layer) {
            let key = ExpertKey::new(layer, expert);
            let r = *residency.get(key).expect("known expert");
            let truth = model.expert_hash(key);
            let (ready, content, source) = match (r.tier, r.handle) {
                (Tier::LocalHbm, _) => (now, truth, Tier::LocalHbm),
                (Tier::PeerHbm, Some(h)) => match runtime.copy(
                    Place::Harvested(h),
                    Place::Device(local),
                    model.expert_size,
                    None,
                ) {
                    Ok(t) => (t.completion_time, t.content, Tier::PeerHbm),
                    Err(HarvestError::StaleHandle(_)) | Err(HarvestError::NotReady(_)) => {
                        residency.invalidate(&h);
                        metrics.fallbacks += 1;
                        let t = runtime.copy(
                            Place::Device(host),
                            Place::Device(local),
                            model.expert_size,
                            Some(truth),
                        )?;
                        (t.completion_time, t.content, Tier::HostDram)
                    }
                    Err(e) => return Err(e.into()),
                },
                _ => {
                    let t = runtime.copy(
                        Place::Device(host),
                        Place::Device(local),
                        model.expert_size,
                        Some(truth),
                    )?;
                    (t.completion_time, t.content, Tier::HostDram)
                }
            };
            if source != Tier::LocalHbm {
                metrics.fetches[tier_index(source)] += 1;
            }
            fetch.arrival = fetch.arrival.max(ready);
            fetch.items.push((key, ready, content, source));
        }
        Ok(fetch)
    };

    let mut digest_acc: ContentHash = 0;
    let mut t = start;
    let mut next: Option<StageFetch> = None;
    for s in 0..total_stages {
        runtime.advance_to(t)?;
        metrics.revocations_seen += rebalancer.absorb_revocations(residency);
        residency.settle(t);
        if let Some(every) = options.rebalance_every {
            if every > 0 && s % every == 0 {
                let (mb, _) = stage_of(s);
                let window = options.history_window.max(1);
                let counts = trace.activation_counts(mb.saturating_sub(window)..mb + 1);
                metrics.migrations += rebalancer.rebalance(model, residency, &counts, runtime)?.len();
            }
        }
        let current = match next.take() {
            Some(f) => f,
            None => issue(s, residency, runtime, &mut metrics)?,
        };
        if s + 1 < total_stages {
            next = Some(issue(s + 1, residency, runtime, &mut metrics)?);
        }
        let used_at = t.max(current.arrival);
        let end = (t + compute).max(current.arrival);
        metrics.fetch_stall_s += end - (t + compute);
        let (mb, _) = stage_of(s);
        metrics.microbatch_latency[mb] += end - t;
        let mut stage_digest = s as u64;
        for (key, ready, content, source) in current.items {
            stage_digest = combine(stage_digest, combine(key.tag(), content));
            metrics.uses.push(ExpertUse {
                key,
                microbatch: mb,
                ready_at: ready,
                used_at,
                source,
            });
        }
        digest_acc = combine(digest_acc, stage_digest);
        t = end;
    }
    runtime.advance_to(t)?;
    metrics.revocations_seen += rebalancer.absorb_revocations(residency);
    residency.settle(t);

    metrics.total_time = t - start;
    metrics.tokens_per_s = pipeline.total_tokens() as f64 / metrics.total_time;
    metrics.output_digest = digest_acc;
    Ok(metrics)
}

/// Checks that no stage used an expert before it was resident.
pub fn check_residency_safety(uses: &[ExpertUse]) -> Result<(), MoeError> {
    for u in uses {
        if u.ready_at > u.used_at {
            return Err(MoeError::Invariant(format!(
                "{:?} used at {} before ready at {}",
                u.key, u.used_at, u.ready_at
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction_pct: f64,
    pub tier: Tier,
    pub tokens_per_s: f64,
    pub stall_s: f64,
}

/// Routing shape used when generating traces for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingShape {
    pub skew: f64,
    pub drift_period: u32,
}

impl Default for RoutingShape {
    fn default() -> Self {
        Self {
            skew: 1.2,
            drift_period: 0,
        }
    }
}

/// Decode throughput with the coldest `fraction` of experts offloaded to
/// `tier` and everything else pinned locally.
pub fn offload_point(
    model: &MoEModelSpec,
    pipeline: &PipelineConfig,
    trace: &RoutingTrace,
    fraction_pct: f64,
    tier: Tier,
    make_runtime: &dyn Fn() -> Result<Runtime, HarvestError>,
) -> Result<SweepRow, MoeError> {
    if !(0.0..=100.0).contains(&fraction_pct) {
        return Err(MoeError::InvalidFraction(fraction_pct));
    }
    let counts = trace.total_counts();
    let mut residency = ExpertResidency::offloaded(model, &counts, fraction_pct);
    let mut runtime = make_runtime()?;
    let mut rebalancer = Rebalancer::new();
    if tier == Tier::PeerHbm {
        // Hottest offloaded experts first so a full peer keeps the useful ones.
        let mut keys: Vec<ExpertKey> = residency
            .iter()
            .filter(|(_, r)| r.tier == Tier::HostDram)
            .map(|(k, _)| *k)
            .collect();
        keys.sort_by(|a, b| counts.get(*b).cmp(&counts.get(*a)).then(a.cmp(b)));
        rebalancer.place(model, &mut residency, keys, &mut runtime)?;
        runtime.run_until_idle();
        residency.settle(runtime.now());
    }
    let metrics = simulate_decode(
        model,
        pipeline,
        trace,
        &mut residency,
        &mut runtime,
        &mut rebalancer,
        &DecodeOptions::default(),
    )?;
    runtime.run_until_idle();
    audit_runtime(&runtime)?;
    Ok(SweepRow {
        fraction_pct,
        tier,
        tokens_per_s: metrics.tokens_per_s,
        stall_s: metrics.fetch_stall_s,
    })
}

/// Fails with the first few ordering violations in the runtime log, or the
/// first accounting inconsistency.
pub fn audit_runtime(runtime: &Runtime) -> Result<(), MoeError> {
    let violations = crate::runtime::audit::check_log(runtime.log());
    if !violations.is_empty() {
        let excerpt: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(MoeError::Invariant(format!(
            "{} ordering violation(s): {}",
            violations.len(),
            excerpt.join("; ")
        )));
    }
    runtime.check_invariants().map_err(MoeError::Invariant)
}

/// Throughput table over offload fractions for one tier.
pub fn offload_sweep(
    model: &MoEModelSpec,
    pipeline: &PipelineConfig,
    fractions: &[f64],
    tier: Tier,
    shape: RoutingShape,
    seed: u64,
    make_runtime: &dyn Fn() -> Result<Runtime, HarvestError>,
) -> Result<Vec<SweepRow>, MoeError> {
    let trace = generate_routing(model, pipeline, shape.skew, shape.drift_period, seed)?;
    fractions
        .iter()
        .map(|&f| offload_point(model, pipeline, &trace, f, tier, make_runtime))
        .collect()
}
