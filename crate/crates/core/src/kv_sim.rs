//! KV-cache offloading: a block table spanning local HBM, harvested peer
//! memory and host DRAM, with eviction, reload, revocation fallback and the
//! peer-versus-host reload latency experiment.
//!
//! Local and host capacity are byte budgets kept here; only peer memory goes
//! through the harvesting runtime. A block occupies a full slot
//! (`block_size * bytes_per_entry`) wherever it lives, while transfers move
//! only its filled entries.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{combine, digest, ContentHash};
use crate::interconnect::Topology;
use crate::memalloc::{DeviceId, Tier};
use crate::runtime::{
    AllocationHints, Durability, HarvestError, HarvestHandle, Mailbox, Place, RevocationChaos,
    Runtime,
};
use crate::sim::SimTime;

pub const DEFAULT_BLOCK_SIZE: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvModelSpec {
    pub name: String,
    /// KV bytes for one token across all layers.
    pub bytes_per_entry: u64,
    pub recompute_time_per_entry: f64,
}

impl KvModelSpec {
    pub fn validate(&self) -> Result<(), KvError> {
        if self.bytes_per_entry == 0 {
            return Err(KvError::InvalidConfig(format!(
                "{}: bytes_per_entry must be positive",
                self.name
            )));
        }
        if !(self.recompute_time_per_entry >= 0.0 && self.recompute_time_per_entry.is_finite()) {
            return Err(KvError::InvalidConfig(format!(
                "{}: recompute_time_per_entry must be finite and non-negative",
                self.name
            )));
        }
        Ok(())
    }

    pub fn recompute_time(&self, entries: u32) -> f64 {
        entries as f64 * self.recompute_time_per_entry
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KvError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token count must be positive")]
    ZeroTokens,
    #[error("no tier can hold block {0}")]
    TierExhausted(u64),
    #[error("unknown block {0}")]
    UnknownBlock(u64),
    #[error("block {0} is already local")]
    AlreadyLocal(u64),
    #[error("topology lacks a {0} device")]
    MissingDevice(&'static str),
    #[error(transparent)]
    Harvest(#[from] HarvestError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Where a block lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvTier {
    LocalHbm,
    PeerHbm,
    HostDram,
    /// Lost with a revoked peer region; must be recomputed.
    NotMaterialized,
}

impl fmt::Display for KvTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KvTier::LocalHbm => "local",
            KvTier::PeerHbm => "peer",
            KvTier::HostDram => "host",
            KvTier::NotMaterialized => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub block_id: u64,
    pub sequence_id: u64,
    /// Index of the block within its sequence.
    pub index: u32,
    pub entries: u32,
    pub durability: Durability,
    pub content_hash: ContentHash,
}

impl KvBlock {
    /// Content of the block's first `entries` token positions.
    pub fn true_hash(sequence_id: u64, index: u32, entries: u32) -> ContentHash {
        digest(&[0x6b76, sequence_id, index as u64, entries as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionOrder {
    /// Least recently accessed first.
    Lru,
    /// Oldest block first.
    Fifo,
    /// Newest sequence first, last block first within it.
    SequenceTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadPolicy {
    pub order: EvictionOrder,
    /// Fraction of the local KV budget that may fill before eviction.
    pub watermark: f64,
}

impl Default for OffloadPolicy {
    fn default() -> Self {
        Self {
            order: EvictionOrder::Lru,
            watermark: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvConfig {
    pub block_size: u32,
    pub policy: OffloadPolicy,
    /// Local HBM bytes available to KV blocks.
    pub local_budget: u64,
    /// Host DRAM bytes available to KV blocks.
    pub host_budget: u64,
}

impl KvConfig {
    pub fn validate(&self) -> Result<(), KvError> {
        if self.block_size == 0 {
            return Err(KvError::InvalidConfig("block_size must be positive".into()));
        }
        let w = self.policy.watermark;
        if !(w > 0.0 && w <= 1.0) {
            return Err(KvError::InvalidConfig(format!("watermark {w} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockEntry {
    pub block: KvBlock,
    pub tier: KvTier,
    pub handle: Option<HarvestHandle>,
    /// Content of the host DRAM copy, if one exists.
    pub host_copy: Option<ContentHash>,
    pub last_access: SimTime,
    /// Local copy usable from this time on.
    pub ready_at: SimTime,
}

impl fmt::Display for BlockEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "block={} seq={} index={} entries={} tier={} host_copy={} last_access={:.9}",
            self.block.block_id,
            self.block.sequence_id,
            self.block.index,
            self.block.entries,
            self.tier,
            self.host_copy.is_some(),
            self.last_access
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KvEvent {
    Evicted { block: u64, to: KvTier, time: SimTime },
    Reloaded { block: u64, from: KvTier, issued: SimTime, ready: SimTime },
    Recomputed { block: u64, issued: SimTime, ready: SimTime },
    Revoked { block: u64, lost: bool, time: SimTime },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FallbackPlan {
    FetchFromHost,
    Recompute,
}

/// Seconds to move `bytes` from host DRAM to the local GPU.
pub fn host_transfer_time(topology: &Topology, bytes: u64) -> Result<f64, KvError> {
    path_time(topology, Tier::HostDram, bytes)
}

/// Seconds to move `bytes` from the first peer to the local GPU.
pub fn peer_transfer_time(topology: &Topology, bytes: u64) -> Result<f64, KvError> {
    path_time(topology, Tier::PeerHbm, bytes)
}

fn path_time(topology: &Topology, tier: Tier, bytes: u64) -> Result<f64, KvError> {
    let src = topology.devices_in(tier).next().ok_or(KvError::MissingDevice(match tier {
        Tier::HostDram => "host",
        _ => "peer",
    }))?;
    let route = topology
        .route(src, topology.local_device())
        .map_err(HarvestError::from)?;
    Ok(route
        .iter()
        .map(|&l| topology.link(l).transfer_time(bytes))
        .sum())
}

/// Chooses how to restore a block that is no longer on the peer tier.
pub fn resolve_fallback(
    block: &KvBlock,
    host_copy_available: bool,
    model: &KvModelSpec,
    topology: &Topology,
) -> Result<FallbackPlan, KvError> {
    if !host_copy_available {
        return Ok(FallbackPlan::Recompute);
    }
    let fetch = host_transfer_time(topology, block.entries as u64 * model.bytes_per_entry)?;
    Ok(if fetch <= model.recompute_time(block.entries) {
        FallbackPlan::FetchFromHost
    } else {
        FallbackPlan::Recompute
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub model: String,
    pub entries: u64,
    pub host_s: f64,
    pub peer_s: f64,
    pub speedup: f64,
}

pub const STANDARD_ENTRY_COUNTS: [u64; 6] = [100, 500, 1000, 2000, 4000, 8000];

/// Host and peer reload latency for each (model, entry count).
pub fn reload_latency_experiment(
    models: &[KvModelSpec],
    entry_counts: &[u64],
    topology: &Topology,
) -> Result<Vec<LatencyRow>, KvError> {
    let mut rows = Vec::new();
    for m in models {
        m.validate()?;
        for &entries in entry_counts {
            let bytes = entries * m.bytes_per_entry;
            let host_s = host_transfer_time(topology, bytes)?;
            let peer_s = peer_transfer_time(topology, bytes)?;
            rows.push(LatencyRow {
                model: m.name.clone(),
                entries,
                host_s,
                peer_s,
                speedup: host_s / peer_s,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default)]
struct SequenceState {
    durability: Durability,
    blocks: Vec<u64>,
}

/// Result of making a block local.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Access {
    pub block: u64,
    pub content: ContentHash,
    pub ready_at: SimTime,
    pub source: KvTier,
}

/// The block table plus the handlers that move blocks between tiers.
#[derive(Debug)]
pub struct KvCache {
    pub model: KvModelSpec,
    pub config: KvConfig,
    blocks: BTreeMap<u64, BlockEntry>,
    sequences: BTreeMap<u64, SequenceState>,
    by_generation: BTreeMap<u64, u64>,
    next_block: u64,
    local_bytes: u64,
    host_bytes: u64,
    mailbox: Mailbox,
    pub chaos: Option<RevocationChaos>,
    events: Vec<KvEvent>,
    local: DeviceId,
    host: DeviceId,
}

impl KvCache {
    pub fn new(model: KvModelSpec, config: KvConfig, topology: &Topology) -> Result<Self, KvError> {
        model.validate()?;
        config.validate()?;
        let host = topology
            .host_device()
            .ok_or(KvError::MissingDevice("host"))?;
        Ok(Self {
            model,
            config,
            blocks: BTreeMap::new(),
            sequences: BTreeMap::new(),
            by_generation: BTreeMap::new(),
            next_block: 0,
            local_bytes: 0,
            host_bytes: 0,
            mailbox: Mailbox::new(),
            chaos: None,
            events: Vec::new(),
            local: topology.local_device(),
            host,
        })
    }

    pub fn slot_bytes(&self) -> u64 {
        self.config.block_size as u64 * self.model.bytes_per_entry
    }

    fn threshold(&self) -> u64 {
        (self.config.local_budget as f64 * self.config.policy.watermark).floor() as u64
    }

    pub fn local_bytes(&self) -> u64 {
        self.local_bytes
    }

    pub fn host_bytes(&self) -> u64 {
        self.host_bytes
    }

    pub fn events(&self) -> &[KvEvent] {
        &self.events
    }

    pub fn block(&self, id: u64) -> Option<&BlockEntry> {
        self.blocks.get(&id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockEntry> {
        self.blocks.values()
    }

    pub fn sequence_blocks(&self, sequence_id: u64) -> &[u64] {
        self.sequences
            .get(&sequence_id)
            .map_or(&[], |s| s.blocks.as_slice())
    }

    /// Line-oriented dump of the block table.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in self.blocks.values() {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    /// Sets the durability used for a sequence's future evictions.
    pub fn set_durability(&mut self, sequence_id: u64, durability: Durability) {
        let seq = self.sequences.entry(sequence_id).or_default();
        seq.durability = durability;
        for id in seq.blocks.clone() {
            if let Some(e) = self.blocks.get_mut(&id) {
                e.block.durability = durability;
            }
        }
    }

    /// Appends `tokens` entries to a sequence, then evicts if the local
    /// watermark is exceeded.
    pub fn append_kv(
        &mut self,
        runtime: &mut Runtime,
        sequence_id: u64,
        tokens: u32,
    ) -> Result<Vec<KvEvent>, KvError> {
        if tokens == 0 {
            return Err(KvError::ZeroTokens);
        }
        let mark = self.events.len();
        let now = runtime.now();
        let slot = self.slot_bytes();
        let block_size = self.config.block_size;
        let mut remaining = tokens;
        while remaining > 0 {
            let tail = self.sequences.get(&sequence_id).and_then(|s| s.blocks.last().copied());
            let open = tail.filter(|id| {
                let e = &self.blocks[id];
                e.block.entries < block_size
            });
            let id = match open {
                Some(id) if self.blocks[&id].tier == KvTier::LocalHbm => id,
                Some(id) => {
                    // the open tail was evicted: bring it back before writing
                    self.make_local(runtime, id)?;
                    id
                }
                None => {
                    let seq = self.sequences.entry(sequence_id).or_default();
                    let id = self.next_block;
                    self.next_block += 1;
                    let index = seq.blocks.len() as u32;
                    seq.blocks.push(id);
                    let durability = seq.durability;
                    self.blocks.insert(
                        id,
                        BlockEntry {
                            block: KvBlock {
                                block_id: id,
                                sequence_id,
                                index,
                                entries: 0,
                                durability,
                                content_hash: KvBlock::true_hash(sequence_id, index, 0),
                            },
                            tier: KvTier::LocalHbm,
                            handle: None,
                            host_copy: None,
                            last_access: now,
                            ready_at: now,
                        },
                    );
                    self.local_bytes += slot;
                    id
                }
            };
            let e = self.blocks.get_mut(&id).unwrap();
            let take = remaining.min(block_size - e.block.entries);
            e.block.entries += take;
            e.block.content_hash =
                KvBlock::true_hash(sequence_id, e.block.index, e.block.entries);
            e.last_access = now;
            remaining -= take;
        }
        let threshold = self.threshold();
        if self.local_bytes > threshold {
            self.evict(runtime, self.local_bytes - threshold, None)?;
        }
        if self.local_bytes > self.config.local_budget {
            return Err(KvError::TierExhausted(self.next_block - 1));
        }
        Ok(self.events[mark..].to_vec())
    }

    fn eviction_order(&self, protect: Option<u64>) -> Vec<u64> {
        let block_size = self.config.block_size;
        let mut ids: Vec<&BlockEntry> = self
            .blocks
            .values()
            .filter(|e| {
                e.tier == KvTier::LocalHbm
                    && e.block.entries == block_size
                    && Some(e.block.block_id) != protect
            })
            .collect();
        match self.config.policy.order {
            EvictionOrder::Lru => ids.sort_by(|a, b| {
                a.last_access
                    .total_cmp(&b.last_access)
                    .then(a.block.block_id.cmp(&b.block.block_id))
            }),
            EvictionOrder::Fifo => ids.sort_by_key(|e| e.block.block_id),
            EvictionOrder::SequenceTail => ids.sort_by(|a, b| {
                b.block
                    .sequence_id
                    .cmp(&a.block.sequence_id)
                    .then(b.block.index.cmp(&a.block.index))
            }),
        }
        ids.into_iter().map(|e| e.block.block_id).collect()
    }

    /// Moves full local blocks out, in policy order, until at least
    /// `bytes_needed` local bytes are released or nothing evictable is left.
    pub fn evict(
        &mut self,
        runtime: &mut Runtime,
        bytes_needed: u64,
        protect: Option<u64>,
    ) -> Result<Vec<KvEvent>, KvError> {
        self.absorb_revocations(runtime);
        let mark = self.events.len();
        let slot = self.slot_bytes();
        let mut released = 0;
        for id in self.eviction_order(protect) {
            if released >= bytes_needed {
                break;
            }
            self.evict_block(runtime, id)?;
            released += slot;
        }
        Ok(self.events[mark..].to_vec())
    }

    fn evict_block(&mut self, runtime: &mut Runtime, id: u64) -> Result<(), KvError> {
        let slot = self.slot_bytes();
        let (block, host_copy) = {
            let e = &self.blocks[&id];
            (e.block.clone(), e.host_copy)
        };
        let bytes = block.entries as u64 * self.model.bytes_per_entry;
        let backed = block.durability == Durability::Backed;
        if backed && host_copy != Some(block.content_hash) {
            self.write_host(runtime, id, bytes, block.content_hash)?;
        }
        let hints = AllocationHints::new(block.durability, id);
        let to = match runtime.harvest_alloc(slot, &hints) {
            Ok(handle) => {
                runtime.harvest_register_cb(handle, self.mailbox.callback())?;
                runtime.copy(
                    Place::Device(self.local),
                    Place::Harvested(handle),
                    bytes,
                    Some(block.content_hash),
                )?;
                if let Some(chaos) = self.chaos.as_mut() {
                    chaos.on_alloc(runtime, handle);
                }
                self.by_generation.insert(handle.generation, id);
                self.blocks.get_mut(&id).unwrap().handle = Some(handle);
                KvTier::PeerHbm
            }
            Err(HarvestError::NoCapacity(_)) | Err(HarvestError::NoPeers) => {
                if !backed {
                    self.write_host(runtime, id, bytes, block.content_hash)?;
                }
                KvTier::HostDram
            }
            Err(e) => return Err(e.into()),
        };
        self.local_bytes -= slot;
        self.blocks.get_mut(&id).unwrap().tier = to;
        self.events.push(KvEvent::Evicted {
            block: id,
            to,
            time: runtime.now(),
        });
        Ok(())
    }

    fn write_host(
        &mut self,
        runtime: &mut Runtime,
        id: u64,
        bytes: u64,
        content: ContentHash,
    ) -> Result<(), KvError> {
        let slot = self.slot_bytes();
        let e = self.blocks.get_mut(&id).unwrap();
        if e.host_copy.is_none() {
            if self.host_bytes + slot > self.config.host_budget {
                return Err(KvError::TierExhausted(id));
            }
            self.host_bytes += slot;
        }
        e.host_copy = Some(content);
        runtime.copy(
            Place::Device(self.local),
            Place::Device(self.host),
            bytes,
            Some(content),
        )?;
        Ok(())
    }

    /// Applies revocation notices: blocks with a host copy fall back to it,
    /// the rest become `NotMaterialized`.
    pub fn absorb_revocations(&mut self, runtime: &Runtime) -> usize {
        let notices = self.mailbox.drain();
        for n in &notices {
            let Some(id) = self.by_generation.remove(&n.handle.generation) else {
                continue;
            };
            let e = self.blocks.get_mut(&id).expect("known block");
            if e.handle != Some(n.handle) {
                continue;
            }
            e.handle = None;
            let lost = e.host_copy.is_none();
            if e.tier == KvTier::PeerHbm {
                e.tier = if lost {
                    KvTier::NotMaterialized
                } else {
                    KvTier::HostDram
                };
            }
            self.events.push(KvEvent::Revoked {
                block: id,
                lost,
                time: runtime.now(),
            });
        }
        notices.len()
    }

    /// Brings a non-local block back to local HBM.
    pub fn reload(&mut self, runtime: &mut Runtime, id: u64) -> Result<Access, KvError> {
        self.absorb_revocations(runtime);
        let entry = self.blocks.get(&id).ok_or(KvError::UnknownBlock(id))?;
        if entry.tier == KvTier::LocalHbm {
            return Err(KvError::AlreadyLocal(id));
        }
        let slot = self.slot_bytes();
        let threshold = self.threshold();
        if self.local_bytes + slot > threshold {
            self.evict(runtime, self.local_bytes + slot - threshold, Some(id))?;
        }
        if self.local_bytes + slot > self.config.local_budget {
            return Err(KvError::TierExhausted(id));
        }
        let now = runtime.now();
        let entry = &self.blocks[&id];
        let block = entry.block.clone();
        let host_copy = entry.host_copy;
        let bytes = block.entries as u64 * self.model.bytes_per_entry;

        let mut source = entry.tier;
        let mut outcome = None;
        if let (KvTier::PeerHbm, Some(h)) = (entry.tier, entry.handle) {
            match runtime.copy(Place::Harvested(h), Place::Device(self.local), bytes, None) {
                Ok(t) => {
                    runtime.harvest_free(h)?;
                    self.by_generation.remove(&h.generation);
                    outcome = Some((t.content, t.completion_time));
                }
                Err(HarvestError::StaleHandle(_)) | Err(HarvestError::NotReady(_)) => {
                    // revoked between lookup and issue
                    self.by_generation.remove(&h.generation);
                    source = if host_copy.is_some() {
                        KvTier::HostDram
                    } else {
                        KvTier::NotMaterialized
                    };
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (content, ready) = match outcome {
            Some(o) => o,
            None => {
                let plan = match source {
                    KvTier::HostDram => {
                        resolve_fallback(&block, host_copy.is_some(), &self.model, runtime.topology())?
                    }
                    _ => FallbackPlan::Recompute,
                };
                match plan {
                    FallbackPlan::FetchFromHost => {
                        let content = host_copy.expect("host copy checked");
                        let t = runtime.copy(
                            Place::Device(self.host),
                            Place::Device(self.local),
                            bytes,
                            Some(content),
                        )?;
                        (t.content, t.completion_time)
                    }
                    FallbackPlan::Recompute => {
                        let ready = now + self.model.recompute_time(block.entries);
                        self.events.push(KvEvent::Recomputed {
                            block: id,
                            issued: now,
                            ready,
                        });
                        source = KvTier::NotMaterialized;
                        (
                            KvBlock::true_hash(block.sequence_id, block.index, block.entries),
                            ready,
                        )
                    }
                }
            }
        };
        if source != KvTier::NotMaterialized {
            self.events.push(KvEvent::Reloaded {
                block: id,
                from: source,
                issued: now,
                ready,
            });
        }
        // Lossy host copies only exist to stand in for a missing peer slot.
        if block.durability == Durability::Lossy && host_copy.is_some() {
            self.host_bytes -= slot;
            self.blocks.get_mut(&id).unwrap().host_copy = None;
        }
        let e = self.blocks.get_mut(&id).unwrap();
        e.tier = KvTier::LocalHbm;
        e.handle = None;
        e.last_access = now;
        e.ready_at = ready;
        self.local_bytes += slot;
        Ok(Access {
            block: id,
            content,
            ready_at: ready,
            source,
        })
    }

    fn make_local(&mut self, runtime: &mut Runtime, id: u64) -> Result<Access, KvError> {
        self.reload(runtime, id)
    }

    /// Reads a block, reloading it first when it is not local.
    pub fn access(&mut self, runtime: &mut Runtime, id: u64) -> Result<Access, KvError> {
        let e = self.blocks.get_mut(&id).ok_or(KvError::UnknownBlock(id))?;
        if e.tier == KvTier::LocalHbm {
            e.last_access = runtime.now();
            return Ok(Access {
                block: id,
                content: e.block.content_hash,
                ready_at: e.ready_at.max(runtime.now()),
                source: KvTier::LocalHbm,
            });
        }
        self.reload(runtime, id)
    }

    /// Checks the table's internal consistency against the runtime.
    pub fn check_invariants(&self, runtime: &Runtime) -> Result<(), KvError> {
        let slot = self.slot_bytes();
        let mut local = 0;
        let mut host = 0;
        for e in self.blocks.values() {
            if e.block.entries > self.config.block_size {
                return Err(KvError::Invariant(format!("{e}: overfull block")));
            }
            match e.tier {
                KvTier::LocalHbm => local += slot,
                KvTier::PeerHbm => {
                    if e.handle.is_none() {
                        return Err(KvError::Invariant(format!("{e}: peer block without handle")));
                    }
                }
                KvTier::HostDram if e.host_copy.is_none() => {
                    return Err(KvError::Invariant(format!("{e}: host block without host copy")));
                }
                KvTier::NotMaterialized if e.block.durability == Durability::Backed => {
                    return Err(KvError::Invariant(format!("{e}: backed block lost")));
                }
                _ => {}
            }
            if e.host_copy.is_some() {
                host += slot;
            }
            // A peer handle may be dead before its notice is drained; it
            // must never be dead with the notice already applied.
            if let Some(h) = e.handle {
                if !runtime.is_live(&h) && !self.by_generation.contains_key(&h.generation) {
                    return Err(KvError::Invariant(format!("{e}: dangling handle")));
                }
            }
        }
        if local != self.local_bytes || host != self.host_bytes {
            return Err(KvError::Invariant(format!(
                "accounting drift: local {local} vs {}, host {host} vs {}",
                self.local_bytes, self.host_bytes
            )));
        }
        Ok(())
    }
}

/// Decode workload shape for [`run_workload`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvWorkload {
    pub sequences: u32,
    pub steps: u32,
    pub tokens_per_step: u32,
    /// Seconds of compute per decode step.
    pub step_time: f64,
    pub durability: Durability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvRunMetrics {
    /// Digest over every block read, in order.
    pub digest: ContentHash,
    pub total_time: f64,
    pub peer_reloads: u64,
    pub host_reloads: u64,
    pub recomputes: u64,
    pub revocations: u64,
}

/// Runs decode steps: each step appends tokens to every sequence and then
/// reads all of that sequence's blocks, as attention would.
pub fn run_workload(
    cache: &mut KvCache,
    runtime: &mut Runtime,
    workload: &KvWorkload,
) -> Result<KvRunMetrics, KvError> {
    for s in 0..workload.sequences as u64 {
        cache.set_durability(s, workload.durability);
    }
    let mut acc: ContentHash = 0;
    let mut t = runtime.now();
    let start = t;
    for _ in 0..workload.steps {
        let mut done = t;
        for s in 0..workload.sequences as u64 {
            cache.append_kv(runtime, s, workload.tokens_per_step)?;
            for id in cache.sequence_blocks(s).to_vec() {
                let a = cache.access(runtime, id)?;
                acc = combine(acc, combine(id, a.content));
                done = done.max(a.ready_at);
            }
        }
        t = done + workload.step_time;
        runtime.advance_to(t)?;
        cache.absorb_revocations(runtime);
        cache.check_invariants(runtime)?;
    }
    runtime.advance_to(t)?;
    cache.absorb_revocations(runtime);
    let mut m = KvRunMetrics {
        digest: acc,
        total_time: t - start,
        peer_reloads: 0,
        host_reloads: 0,
        recomputes: 0,
        revocations: 0,
    };
    for e in cache.events() {
        match e {
            KvEvent::Reloaded { from: KvTier::PeerHbm, .. } => m.peer_reloads += 1,
            KvEvent::Reloaded { .. } => m.host_reloads += 1,
            KvEvent::Recomputed { .. } => m.recomputes += 1,
            KvEvent::Revoked { .. } => m.revocations += 1,
            KvEvent::Evicted { .. } => {}
        }
    }
    Ok(m)
}
