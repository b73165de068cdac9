//! Opportunistic peer-memory allocation with ordered revocation.
//!
//! Applications obtain peer HBM through [`Runtime::harvest_alloc`], move data
//! with explicit [`Runtime::copy`] calls and may register a callback per
//! handle. A revocation always runs in four steps separated in sim time:
//! in-flight transfers touching the region drain, the placement entry is
//! invalidated, the callback fires, and only then is the segment freed.
//!
//! The runtime never initiates a transfer of its own and never writes peer
//! contents back anywhere; durability is the application's business.

pub mod audit;
pub mod chaos;
pub mod policy;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::ContentHash;
use crate::interconnect::{LinkScheduler, Topology, TopologyError};
use crate::memalloc::{AllocError, DeviceId, DeviceState, Segment, Tier};
use crate::sim::{EventQueue, SimTime};

pub use chaos::RevocationChaos;
pub use policy::{Candidate, PolicyKind, PolicyState};

/// Identity of one peer allocation. The generation is unique per allocation,
/// so a handle to a freed range never matches a later allocation of the
/// same range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HarvestHandle {
    pub device: DeviceId,
    pub base: u64,
    pub size: u64,
    pub generation: u64,
}

impl HarvestHandle {
    pub fn segment(&self) -> Segment {
        Segment::new(self.base, self.size)
    }
}

impl fmt::Display for HarvestHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}+{}#{}",
            self.device, self.base, self.size, self.generation
        )
    }
}

/// What happens to an object when its peer copy is revoked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Durability {
    /// An authoritative copy lives in host DRAM.
    Backed,
    /// The object is lost and must be reconstructed.
    #[default]
    Lossy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct ClientId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AllocationHints {
    pub preferred_devices: Option<Vec<DeviceId>>,
    pub durability: Durability,
    pub client_id: ClientId,
    pub locality_group: Option<String>,
    /// Application object identifier recorded in the placement map.
    pub object_tag: u64,
}

impl AllocationHints {
    pub fn new(durability: Durability, object_tag: u64) -> Self {
        Self {
            durability,
            object_tag,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RevokeReason {
    Pressure,
    Policy,
    ExternalReclaim,
}

/// Order in which a reclaim picks victims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReclaimOrder {
    /// Least recently accessed first.
    #[default]
    Lru,
    /// Oldest allocation first.
    Fifo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransferId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallbackId(pub u64);

/// Delivered to a revocation callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevocationNotice {
    pub handle: HarvestHandle,
    pub reason: RevokeReason,
    pub object_tag: u64,
    pub durability: Durability,
    pub time: SimTime,
}

pub type RevocationCallback = Box<dyn FnMut(&RevocationNotice) + Send>;

/// Shared inbox that turns callbacks into notices an application can poll.
#[derive(Debug, Clone, Default)]
pub struct Mailbox {
    inner: Arc<Mutex<Vec<RevocationNotice>>>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn callback(&self) -> RevocationCallback {
        let inner = Arc::clone(&self.inner);
        Box::new(move |n: &RevocationNotice| inner.lock().unwrap().push(*n))
    }

    pub fn drain(&self) -> Vec<RevocationNotice> {
        std::mem::take(&mut *self.inner.lock().unwrap())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source or destination of a copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Place {
    /// Application-managed memory on a local or host device.
    Device(DeviceId),
    /// A harvested peer region.
    Harvested(HarvestHandle),
}

impl Place {
    pub fn device(&self) -> DeviceId {
        match self {
            Place::Device(d) => *d,
            Place::Harvested(h) => h.device,
        }
    }

    fn generation(&self) -> Option<u64> {
        match self {
            Place::Harvested(h) => Some(h.generation),
            Place::Device(_) => None,
        }
    }
}

/// Returned for every scheduled copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferTicket {
    pub id: TransferId,
    pub issue_time: SimTime,
    pub start_time: SimTime,
    pub completion_time: SimTime,
    /// Content carried by the copy.
    pub content: ContentHash,
}

impl TransferTicket {
    pub fn latency(&self) -> f64 {
        self.completion_time - self.issue_time
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarvestError {
    #[error("no peer can hold {0} bytes")]
    NoCapacity(u64),
    #[error("no peer devices are registered")]
    NoPeers,
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("stale handle {0}")]
    StaleHandle(HarvestHandle),
    #[error("peer region {0} has not been written yet")]
    NotReady(HarvestHandle),
    #[error("copy of {size} bytes does not fit {handle}")]
    SizeMismatch { handle: HarvestHandle, size: u64 },
    #[error("a copy sourced from {0} needs its content digest")]
    MissingContent(DeviceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("{0} is not a peer device")]
    NotPeer(DeviceId),
    #[error("time {requested} is before current time {now}")]
    TimeReversal { now: SimTime, requested: SimTime },
    #[error(transparent)]
    Routing(#[from] TopologyError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

/// Whether a transfer was issued by an application or by the runtime itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Application,
    Runtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidationCause {
    Revocation(RevokeReason),
    Free,
}

/// One entry of the runtime's event log.
#[derive(Debug, Clone, PartialEq)]
pub enum LogKind {
    Allocated {
        handle: HarvestHandle,
        client: ClientId,
        object_tag: u64,
    },
    AllocRejected {
        size: u64,
        client: ClientId,
    },
    TransferIssued {
        id: TransferId,
        src: DeviceId,
        dst: DeviceId,
        src_generation: Option<u64>,
        dst_generation: Option<u64>,
        size: u64,
        completion_time: SimTime,
        origin: Origin,
    },
    TransferCompleted {
        id: TransferId,
        src: DeviceId,
        dst: DeviceId,
        generations: Vec<u64>,
    },
    RevokeRequested {
        handle: HarvestHandle,
        reason: RevokeReason,
    },
    Invalidated {
        handle: HarvestHandle,
        cause: InvalidationCause,
    },
    CallbackFired {
        handle: HarvestHandle,
        callback: CallbackId,
    },
    CallbackAbsent {
        handle: HarvestHandle,
    },
    Freed {
        handle: HarvestHandle,
    },
    LimitChanged {
        device: DeviceId,
        bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub time: SimTime,
    pub kind: LogKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeConfig {
    /// Sim-time gap between consecutive revocation steps.
    pub revocation_step: f64,
    pub reclaim_order: ReclaimOrder,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            revocation_step: 1e-9,
            reclaim_order: ReclaimOrder::Lru,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Live,
    /// Revocation requested; transfers still allowed, drain pending.
    Revoking(RevokeReason),
    /// Invalidated; waiting for notify and/or free. Carries the revocation
    /// reason, `None` when the application freed the handle.
    Dead(Option<RevokeReason>),
}

struct Placement {
    handle: HarvestHandle,
    object_tag: u64,
    durability: Durability,
    client: ClientId,
    callback: Option<(CallbackId, RevocationCallback)>,
    phase: Phase,
    last_access: SimTime,
    allocated_at: SimTime,
    content: Option<ContentHash>,
    inflight_until: SimTime,
}

/// Read-only view of a placement-map entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementInfo {
    pub handle: HarvestHandle,
    pub object_tag: u64,
    pub durability: Durability,
    pub client: ClientId,
    pub callback: Option<CallbackId>,
    pub live: bool,
    pub last_access: SimTime,
}

#[derive(Debug, Clone)]
struct TransferRecord {
    src: Place,
    dst: Place,
    content: ContentHash,
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    TransferComplete(TransferId),
    Invalidate(u64),
    Notify(u64),
    Free(u64),
    Revoke(HarvestHandle, RevokeReason),
    SetLimit(DeviceId, u64),
}

/// One simulation's harvesting runtime. Single writer: everything is
/// mutated through `&mut self` by the driving event loop.
pub struct Runtime {
    topology: Topology,
    config: RuntimeConfig,
    policy: PolicyState,
    peers: BTreeMap<DeviceId, DeviceState>,
    limits: BTreeMap<DeviceId, u64>,
    placements: BTreeMap<u64, Placement>,
    transfers: BTreeMap<TransferId, TransferRecord>,
    links: LinkScheduler,
    queue: EventQueue<Event>,
    log: Vec<LogRecord>,
    now: SimTime,
    next_generation: u64,
    next_transfer: u64,
    next_callback: u64,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("now", &self.now)
            .field("peers", &self.peers.keys().collect::<Vec<_>>())
            .field("placements", &self.placements.len())
            .finish()
    }
}

impl Runtime {
    pub fn new(topology: Topology, policy: PolicyKind) -> Result<Self, HarvestError> {
        Self::with_config(topology, policy, RuntimeConfig::default())
    }

    pub fn with_config(
        topology: Topology,
        policy: PolicyKind,
        config: RuntimeConfig,
    ) -> Result<Self, HarvestError> {
        topology.validate()?;
        let mut peers = BTreeMap::new();
        let mut limits = BTreeMap::new();
        for spec in topology.devices.iter().filter(|d| d.tier == Tier::PeerHbm) {
            limits.insert(spec.device_id, spec.usable());
            peers.insert(spec.device_id, DeviceState::new(spec.clone())?);
        }
        Ok(Self {
            topology,
            config,
            policy: PolicyState::new(policy),
            peers,
            limits,
            placements: BTreeMap::new(),
            transfers: BTreeMap::new(),
            links: LinkScheduler::new(),
            queue: EventQueue::new(),
            log: Vec::new(),
            now: 0.0,
            next_generation: 1,
            next_transfer: 0,
            next_callback: 0,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn policy(&self) -> &PolicyState {
        &self.policy
    }

    pub fn peer(&self, device: DeviceId) -> Option<&DeviceState> {
        self.peers.get(&device)
    }

    pub fn peers(&self) -> impl Iterator<Item = &DeviceState> {
        self.peers.values()
    }

    /// Current availability limit of a peer (bytes it may hold in total).
    pub fn limit(&self, device: DeviceId) -> Option<u64> {
        self.limits.get(&device).copied()
    }

    /// Free bytes a peer can still hand out, honoring its availability limit.
    pub fn harvestable(&self, device: DeviceId) -> u64 {
        match (self.peers.get(&device), self.limits.get(&device)) {
            (Some(state), Some(&limit)) => state
                .harvestable_capacity()
                .min(limit.saturating_sub(state.allocated_bytes())),
            _ => 0,
        }
    }

    pub fn total_harvestable(&self) -> u64 {
        self.peers.keys().map(|&d| self.harvestable(d)).sum()
    }

    pub fn placement(&self, handle: &HarvestHandle) -> Option<PlacementInfo> {
        self.placements
            .get(&handle.generation)
            .filter(|p| p.handle == *handle)
            .map(|p| PlacementInfo {
                handle: p.handle,
                object_tag: p.object_tag,
                durability: p.durability,
                client: p.client,
                callback: p.callback.as_ref().map(|c| c.0),
                live: !matches!(p.phase, Phase::Dead(_)),
                last_access: p.last_access,
            })
    }

    /// Live (not yet invalidated) handles, in generation order.
    pub fn live_handles(&self) -> Vec<HarvestHandle> {
        self.placements
            .values()
            .filter(|p| !matches!(p.phase, Phase::Dead(_)))
            .map(|p| p.handle)
            .collect()
    }

    pub fn is_live(&self, handle: &HarvestHandle) -> bool {
        self.live(handle).is_ok()
    }

    fn live(&self, handle: &HarvestHandle) -> Result<&Placement, HarvestError> {
        match self.placements.get(&handle.generation) {
            Some(p) if p.handle == *handle && !matches!(p.phase, Phase::Dead(_)) => Ok(p),
            _ => Err(HarvestError::StaleHandle(*handle)),
        }
    }

    fn record(&mut self, kind: LogKind) {
        self.log.push(LogRecord {
            time: self.now,
            kind,
        });
    }

    // ---- allocation -------------------------------------------------------

    pub fn candidates(&self) -> Vec<Candidate<'_>> {
        self.peers
            .values()
            .map(|state| Candidate {
                state,
                allowance: self.harvestable(state.id()),
                hops: self.topology.hops_to_local(state.id()).unwrap_or(u32::MAX),
            })
            .collect()
    }

    pub fn harvest_alloc(
        &mut self,
        size: u64,
        hints: &AllocationHints,
    ) -> Result<HarvestHandle, HarvestError> {
        if size == 0 {
            return Err(HarvestError::ZeroSize);
        }
        if self.peers.is_empty() {
            return Err(HarvestError::NoPeers);
        }
        let now = self.now;
        // Candidates borrow `peers`; the policy state is a disjoint field.
        let candidates: Vec<Candidate<'_>> = self
            .peers
            .values()
            .map(|state| Candidate {
                state,
                allowance: self
                    .limits
                    .get(&state.id())
                    .copied()
                    .unwrap_or(0)
                    .saturating_sub(state.allocated_bytes()),
                hops: self.topology.hops_to_local(state.id()).unwrap_or(u32::MAX),
            })
            .collect();
        let choice = self.policy.select_peer(&candidates, size, hints, now);
        let Some((device, _)) = choice else {
            self.record(LogKind::AllocRejected {
                size,
                client: hints.client_id,
            });
            return Err(HarvestError::NoCapacity(size));
        };
        let segment = self
            .peers
            .get_mut(&device)
            .expect("selected peer exists")
            .alloc_best_fit(size)?;
        let handle = HarvestHandle {
            device,
            base: segment.base,
            size,
            generation: self.next_generation,
        };
        self.next_generation += 1;
        self.placements.insert(
            handle.generation,
            Placement {
                handle,
                object_tag: hints.object_tag,
                durability: hints.durability,
                client: hints.client_id,
                callback: None,
                phase: Phase::Live,
                last_access: now,
                allocated_at: now,
                content: None,
                inflight_until: f64::NEG_INFINITY,
            },
        );
        self.record(LogKind::Allocated {
            handle,
            client: hints.client_id,
            object_tag: hints.object_tag,
        });
        Ok(handle)
    }

    /// Releases a handle. The placement entry is invalidated immediately; the
    /// segment is freed once every in-flight transfer touching it completed.
    ///
    /// Freeing a handle that is already being revoked is accepted and leaves
    /// the revocation to finish (its callback still fires).
    pub fn harvest_free(&mut self, handle: HarvestHandle) -> Result<(), HarvestError> {
        if let Phase::Revoking(_) = self.live(&handle)?.phase {
            return Ok(());
        }
        let step = self.config.revocation_step;
        let now = self.now;
        let entry = self.placements.get_mut(&handle.generation).unwrap();
        entry.phase = Phase::Dead(None);
        entry.callback = None;
        let drain = entry.inflight_until;
        self.record(LogKind::Invalidated {
            handle,
            cause: InvalidationCause::Free,
        });
        if drain < now {
            self.finish_free(handle.generation);
        } else {
            self.queue.push(drain + step, Event::Free(handle.generation));
        }
        Ok(())
    }

    /// Registers the revocation callback, replacing any previous one.
    pub fn harvest_register_cb(
        &mut self,
        handle: HarvestHandle,
        callback: RevocationCallback,
    ) -> Result<CallbackId, HarvestError> {
        self.live(&handle)?;
        let id = CallbackId(self.next_callback);
        self.next_callback += 1;
        self.placements.get_mut(&handle.generation).unwrap().callback = Some((id, callback));
        Ok(id)
    }

    // ---- revocation -------------------------------------------------------

    /// Starts revoking `handle`. Stale or already-revoking handles are a no-op.
    pub fn revoke(&mut self, handle: HarvestHandle, reason: RevokeReason) {
        let step = self.config.revocation_step;
        let now = self.now;
        let Some(entry) = self.placements.get_mut(&handle.generation) else {
            return;
        };
        if entry.handle != handle || entry.phase != Phase::Live {
            return;
        }
        entry.phase = Phase::Revoking(reason);
        let drain = entry.inflight_until.max(now);
        self.record(LogKind::RevokeRequested { handle, reason });
        self.queue.push(drain + step, Event::Invalidate(handle.generation));
    }

    /// Revokes handles on `device` in reclaim order until at least `amount`
    /// bytes are being released or no live handle remains.
    pub fn external_reclaim(
        &mut self,
        device: DeviceId,
        amount: u64,
    ) -> Result<Vec<HarvestHandle>, HarvestError> {
        if !self.peers.contains_key(&device) {
            return Err(if self.topology.device(device).is_some() {
                HarvestError::NotPeer(device)
            } else {
                HarvestError::UnknownDevice(device)
            });
        }
        Ok(self.reclaim(device, amount, RevokeReason::ExternalReclaim))
    }

    /// Revokes with `Pressure` until `incoming` bytes of demand fit under
    /// the peer's limit.
    pub fn relieve_pressure(&mut self, device: DeviceId, incoming: u64) -> Vec<HarvestHandle> {
        let free = self.harvestable(device);
        if free >= incoming {
            return Vec::new();
        }
        self.reclaim(device, incoming - free, RevokeReason::Pressure)
    }

    fn reclaim(&mut self, device: DeviceId, amount: u64, reason: RevokeReason) -> Vec<HarvestHandle> {
        if amount == 0 {
            return Vec::new();
        }
        let mut victims: Vec<&Placement> = self
            .placements
            .values()
            .filter(|p| p.handle.device == device && p.phase == Phase::Live)
            .collect();
        match self.config.reclaim_order {
            ReclaimOrder::Lru => victims.sort_by(|a, b| {
                a.last_access
                    .total_cmp(&b.last_access)
                    .then(a.handle.generation.cmp(&b.handle.generation))
            }),
            ReclaimOrder::Fifo => victims.sort_by(|a, b| {
                a.allocated_at
                    .total_cmp(&b.allocated_at)
                    .then(a.handle.generation.cmp(&b.handle.generation))
            }),
        }
        let mut chosen = Vec::new();
        let mut released = 0;
        for v in victims {
            if released >= amount {
                break;
            }
            released += v.handle.size;
            chosen.push(v.handle);
        }
        for &h in &chosen {
            self.revoke(h, reason);
        }
        chosen
    }

    /// Bytes on `device` held by live handles not already being revoked.
    pub fn committed_bytes(&self, device: DeviceId) -> u64 {
        self.placements
            .values()
            .filter(|p| p.handle.device == device && p.phase == Phase::Live)
            .map(|p| p.handle.size)
            .sum()
    }

    /// Changes how many bytes a peer may hold and reclaims the shortfall.
    pub fn set_harvest_limit(
        &mut self,
        device: DeviceId,
        bytes: u64,
    ) -> Result<Vec<HarvestHandle>, HarvestError> {
        let usable = self
            .peers
            .get(&device)
            .ok_or(HarvestError::NotPeer(device))?
            .spec()
            .usable();
        let limit = bytes.min(usable);
        self.limits.insert(device, limit);
        self.record(LogKind::LimitChanged {
            device,
            bytes: limit,
        });
        let shortfall = self.committed_bytes(device).saturating_sub(limit);
        Ok(self.reclaim(device, shortfall, RevokeReason::ExternalReclaim))
    }

    pub fn schedule_limit(&mut self, at: SimTime, device: DeviceId, bytes: u64) {
        self.queue.push(at.max(self.now), Event::SetLimit(device, bytes));
    }

    pub fn schedule_revoke(&mut self, at: SimTime, handle: HarvestHandle, reason: RevokeReason) {
        self.queue.push(at.max(self.now), Event::Revoke(handle, reason));
    }

    // ---- data movement ----------------------------------------------------

    /// Schedules an explicit copy. Harvested endpoints must be live; a
    /// harvested source supplies its stored content, any other source needs
    /// `content`. A harvested destination stores the content on completion.
    pub fn copy(
        &mut self,
        src: Place,
        dst: Place,
        size: u64,
        content: Option<ContentHash>,
    ) -> Result<TransferTicket, HarvestError> {
        for place in [src, dst] {
            match place {
                Place::Harvested(h) => {
                    self.live(&h)?;
                    if size > h.size {
                        return Err(HarvestError::SizeMismatch { handle: h, size });
                    }
                }
                Place::Device(d) => {
                    if self.topology.device(d).is_none() {
                        return Err(HarvestError::UnknownDevice(d));
                    }
                }
            }
        }
        let content = match src {
            Place::Harvested(h) => self
                .live(&h)?
                .content
                .ok_or(HarvestError::NotReady(h))?,
            Place::Device(d) => content.ok_or(HarvestError::MissingContent(d))?,
        };
        let id = TransferId(self.next_transfer);
        let scheduled = self.links.reserve(
            &self.topology,
            src.device(),
            dst.device(),
            size,
            self.now,
            id.0,
        )?;
        self.next_transfer += 1;
        let now = self.now;
        for g in [src.generation(), dst.generation()].into_iter().flatten() {
            let p = self.placements.get_mut(&g).unwrap();
            p.inflight_until = p.inflight_until.max(scheduled.completion_time);
            p.last_access = now;
        }
        self.transfers.insert(id, TransferRecord { src, dst, content });
        self.queue
            .push(scheduled.completion_time, Event::TransferComplete(id));
        self.record(LogKind::TransferIssued {
            id,
            src: src.device(),
            dst: dst.device(),
            src_generation: src.generation(),
            dst_generation: dst.generation(),
            size,
            completion_time: scheduled.completion_time,
            origin: Origin::Application,
        });
        Ok(TransferTicket {
            id,
            issue_time: now,
            start_time: scheduled.start_time,
            completion_time: scheduled.completion_time,
            content,
        })
    }

    /// Marks a harvested object as used without moving data (LRU bookkeeping).
    pub fn touch(&mut self, handle: &HarvestHandle) -> Result<(), HarvestError> {
        self.live(handle)?;
        let now = self.now;
        self.placements.get_mut(&handle.generation).unwrap().last_access = now;
        Ok(())
    }

    /// Content currently stored in a live harvested region.
    pub fn content(&self, handle: &HarvestHandle) -> Result<Option<ContentHash>, HarvestError> {
        Ok(self.live(handle)?.content)
    }

    // ---- event loop -------------------------------------------------------

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek_time()
    }

    /// Processes every runtime event due at or before `t`, then sets the
    /// clock to `t`.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), HarvestError> {
        if t < self.now {
            return Err(HarvestError::TimeReversal {
                now: self.now,
                requested: t,
            });
        }
        while let Some((time, event)) = self.queue.pop_due(t) {
            self.now = time.max(self.now);
            self.handle_event(event);
        }
        self.now = t;
        Ok(())
    }

    /// Processes everything left in the queue.
    pub fn run_until_idle(&mut self) {
        while let Some((time, event)) = self.queue.pop() {
            self.now = time.max(self.now);
            self.handle_event(event);
        }
    }

    fn handle_event(&mut self, event: Event) {
        let step = self.config.revocation_step;
        match event {
            Event::TransferComplete(id) => {
                let rec = self.transfers.remove(&id).expect("known transfer");
                if let Place::Harvested(h) = rec.dst {
                    if let Some(p) = self.placements.get_mut(&h.generation) {
                        p.content = Some(rec.content);
                    }
                }
                let generations = [rec.src.generation(), rec.dst.generation()]
                    .into_iter()
                    .flatten()
                    .collect();
                self.record(LogKind::TransferCompleted {
                    id,
                    src: rec.src.device(),
                    dst: rec.dst.device(),
                    generations,
                });
            }
            Event::Invalidate(g) => {
                let now = self.now;
                let Some(p) = self.placements.get_mut(&g) else {
                    return;
                };
                let Phase::Revoking(reason) = p.phase else {
                    return;
                };
                if p.inflight_until >= now {
                    // a transfer was issued while draining
                    let again = p.inflight_until + step;
                    self.queue.push(again, Event::Invalidate(g));
                    return;
                }
                p.phase = Phase::Dead(Some(reason));
                let handle = p.handle;
                self.record(LogKind::Invalidated {
                    handle,
                    cause: InvalidationCause::Revocation(reason),
                });
                self.queue.push(now + step, Event::Notify(g));
            }
            Event::Notify(g) => {
                let now = self.now;
                let Some(p) = self.placements.get_mut(&g) else {
                    return;
                };
                let Phase::Dead(Some(reason)) = p.phase else {
                    return;
                };
                let handle = p.handle;
                let notice = RevocationNotice {
                    handle,
                    reason,
                    object_tag: p.object_tag,
                    durability: p.durability,
                    time: now,
                };
                let fired = p.callback.take().map(|(id, mut cb)| {
                    cb(&notice);
                    id
                });
                self.record(match fired {
                    Some(callback) => LogKind::CallbackFired { handle, callback },
                    None => LogKind::CallbackAbsent { handle },
                });
                self.queue.push(now + step, Event::Free(g));
            }
            Event::Free(g) => {
                let now = self.now;
                if let Some(p) = self.placements.get(&g) {
                    if p.inflight_until >= now {
                        let again = p.inflight_until + step;
                        self.queue.push(again, Event::Free(g));
                        return;
                    }
                }
                self.finish_free(g);
            }
            Event::Revoke(handle, reason) => self.revoke(handle, reason),
            Event::SetLimit(device, bytes) => {
                let _ = self.set_harvest_limit(device, bytes);
            }
        }
    }

    fn finish_free(&mut self, g: u64) {
        let Some(p) = self.placements.remove(&g) else {
            return;
        };
        let handle = p.handle;
        self.peers
            .get_mut(&handle.device)
            .expect("peer exists")
            .free_segment(handle.segment())
            .expect("placement segment is allocated");
        self.record(LogKind::Freed { handle });
        if let Phase::Dead(Some(_)) = p.phase {
            self.policy.record_revocation(handle.device, self.now);
        }
    }

    /// Cross-checks the placement map against peer allocator state.
    pub fn check_invariants(&self) -> Result<(), String> {
        for state in self.peers.values() {
            state.check_invariants()?;
            let mut from_map: Vec<Segment> = self
                .placements
                .values()
                .filter(|p| p.handle.device == state.id())
                .map(|p| p.handle.segment())
                .collect();
            from_map.sort();
            let allocated: Vec<Segment> = state.allocated_segments().collect();
            if from_map != allocated {
                return Err(format!(
                    "{}: placement map {:?} disagrees with allocator {:?}",
                    state.id(),
                    from_map,
                    allocated
                ));
            }
        }
        Ok(())
    }
}
