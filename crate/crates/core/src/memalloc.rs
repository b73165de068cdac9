//! Segment-granularity memory accounting for modeled devices.
//!
//! Each device exposes a single usable range `[0, capacity - reserved - headroom)`.
//! `reserved` models the capacity withheld behind an isolation boundary (a
//! MIG instance on the peer) and `headroom` a safety margin that is never
//! handed out. Allocation is best-fit over a base-ordered, eagerly coalesced
//! free list.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

/// Role a device plays in the memory hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    LocalHbm,
    PeerHbm,
    HostDram,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::LocalHbm => "local",
            Tier::PeerHbm => "peer",
            Tier::HostDram => "host",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device_id: DeviceId,
    pub tier: Tier,
    pub capacity: u64,
    #[serde(default)]
    pub reserved: u64,
    #[serde(default)]
    pub headroom: u64,
}

impl DeviceSpec {
    pub fn new(device_id: u32, tier: Tier, capacity: u64) -> Self {
        Self {
            device_id: DeviceId(device_id),
            tier,
            capacity,
            reserved: 0,
            headroom: 0,
        }
    }

    pub fn with_reserved(mut self, reserved: u64) -> Self {
        self.reserved = reserved;
        self
    }

    pub fn with_headroom(mut self, headroom: u64) -> Self {
        self.headroom = headroom;
        self
    }

    /// Bytes that can ever be handed out on this device.
    pub fn usable(&self) -> u64 {
        self.capacity.saturating_sub(self.reserved + self.headroom)
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        if self.capacity == 0 {
            return Err(AllocError::InvalidSpec(format!(
                "{}: capacity must be positive",
                self.device_id
            )));
        }
        match self.reserved.checked_add(self.headroom) {
            Some(withheld) if withheld <= self.capacity => Ok(()),
            _ => Err(AllocError::InvalidSpec(format!(
                "{}: reserved ({}) + headroom ({}) exceeds capacity ({})",
                self.device_id, self.reserved, self.headroom, self.capacity
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub base: u64,
    pub size: u64,
}

impl Segment {
    pub fn new(base: u64, size: u64) -> Self {
        Self { base, size }
    }

    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{},{}}}", self.base, self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("invalid device spec: {0}")]
    InvalidSpec(String),
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("no free segment holds {requested} bytes")]
    NoCapacity { requested: u64 },
    #[error("segment {0} is not currently allocated")]
    DoubleFree(Segment),
}

/// Live accounting for one device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    spec: DeviceSpec,
    free: BTreeMap<u64, u64>,
    allocated: BTreeMap<u64, u64>,
}

impl DeviceState {
    /// A fresh device with a single free segment covering the usable range.
    pub fn new(spec: DeviceSpec) -> Result<Self, AllocError> {
        spec.validate()?;
        let mut free = BTreeMap::new();
        let usable = spec.usable();
        if usable > 0 {
            free.insert(0, usable);
        }
        Ok(Self {
            spec,
            free,
            allocated: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn id(&self) -> DeviceId {
        self.spec.device_id
    }

    pub fn free_segments(&self) -> impl Iterator<Item = Segment> + '_ {
        self.free.iter().map(|(&base, &size)| Segment { base, size })
    }

    pub fn allocated_segments(&self) -> impl Iterator<Item = Segment> + '_ {
        self.allocated.iter().map(|(&base, &size)| Segment { base, size })
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated.values().sum()
    }

    /// Sum of free segments.
    pub fn harvestable_capacity(&self) -> u64 {
        self.free.values().sum()
    }

    pub fn largest_free(&self) -> u64 {
        self.free.values().copied().max().unwrap_or(0)
    }

    /// `1 - largest_free / total_free`; zero when nothing is free.
    pub fn fragmentation(&self) -> f64 {
        let total = self.harvestable_capacity();
        if total == 0 {
            0.0
        } else {
            1.0 - self.largest_free() as f64 / total as f64
        }
    }

    /// The free segment best-fit would carve `size` bytes out of, without
    /// mutating anything. Smallest leftover wins, ties go to the lowest base.
    pub fn best_fit(&self, size: u64) -> Option<Segment> {
        if size == 0 {
            return None;
        }
        let mut best: Option<Segment> = None;
        for (&base, &seg_size) in &self.free {
            if seg_size < size {
                continue;
            }
            // Strict comparison keeps the lowest base on ties since the map
            // iterates in base order.
            if best.is_none_or(|b| seg_size < b.size) {
                best = Some(Segment::new(base, seg_size));
                if seg_size == size {
                    break;
                }
            }
        }
        best
    }

    pub fn alloc_best_fit(&mut self, size: u64) -> Result<Segment, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let chosen = self
            .best_fit(size)
            .ok_or(AllocError::NoCapacity { requested: size })?;
        self.free.remove(&chosen.base);
        if chosen.size > size {
            self.free.insert(chosen.base + size, chosen.size - size);
        }
        self.allocated.insert(chosen.base, size);
        Ok(Segment::new(chosen.base, size))
    }

    pub fn free_segment(&mut self, segment: Segment) -> Result<(), AllocError> {
        match self.allocated.get(&segment.base) {
            Some(&size) if size == segment.size => {}
            _ => return Err(AllocError::DoubleFree(segment)),
        }
        self.allocated.remove(&segment.base);

        let mut base = segment.base;
        let mut size = segment.size;
        if let Some((&prev_base, &prev_size)) = self.free.range(..base).next_back() {
            if prev_base + prev_size == base {
                self.free.remove(&prev_base);
                base = prev_base;
                size += prev_size;
            }
        }
        if let Some(&next_size) = self.free.get(&(base + size)) {
            self.free.remove(&(base + size));
            size += next_size;
        }
        self.free.insert(base, size);
        Ok(())
    }

    pub fn is_allocated(&self, segment: Segment) -> bool {
        self.allocated.get(&segment.base) == Some(&segment.size)
    }

    /// Checks the accounting invariants, returning a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut all: Vec<(Segment, bool)> = self
            .free_segments()
            .map(|s| (s, true))
            .chain(self.allocated_segments().map(|s| (s, false)))
            .collect();
        all.sort();
        for w in all.windows(2) {
            if w[0].0.overlaps(&w[1].0) {
                return Err(format!("segments {} and {} overlap", w[0].0, w[1].0));
            }
        }
        for (s, _) in &all {
            if s.size == 0 {
                return Err(format!("empty segment at {}", s.base));
            }
            if s.end() > self.spec.capacity {
                return Err(format!("segment {} exceeds capacity", s));
            }
        }
        let total: u64 = self.harvestable_capacity() + self.allocated_bytes();
        if total != self.spec.usable() {
            return Err(format!(
                "free + allocated = {} but usable capacity is {}",
                total,
                self.spec.usable()
            ));
        }
        let free: Vec<Segment> = self.free_segments().collect();
        for w in free.windows(2) {
            if w[0].end() == w[1].base {
                return Err(format!("free segments {} and {} not coalesced", w[0], w[1]));
            }
        }
        Ok(())
    }

    /// Rebuilds a device whose free list is exactly `free` (coalesced); every
    /// other usable byte is treated as allocated in maximal runs.
    pub fn from_free_list(spec: DeviceSpec, free: &[Segment]) -> Result<Self, AllocError> {
        let mut state = Self::new(spec)?;
        state.free.clear();
        let mut sorted = free.to_vec();
        sorted.sort();
        let usable = state.spec.usable();
        let mut cursor = 0;
        for seg in sorted {
            if seg.size == 0 || seg.base < cursor || seg.end() > usable {
                return Err(AllocError::InvalidSpec(format!(
                    "free segment {seg} is empty, overlaps another or exceeds usable capacity"
                )));
            }
            if seg.base > cursor {
                state.allocated.insert(cursor, seg.base - cursor);
                state.free.insert(seg.base, seg.size);
            } else if let Some((&prev, size)) = state.free.iter_mut().next_back() {
                if prev + *size == seg.base {
                    *size += seg.size;
                } else {
                    state.free.insert(seg.base, seg.size);
                }
            } else {
                state.free.insert(seg.base, seg.size);
            }
            cursor = seg.end();
        }
        if cursor < usable {
            state.allocated.insert(cursor, usable - cursor);
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::GIB;

    fn spec(capacity: u64) -> DeviceSpec {
        DeviceSpec::new(1, Tier::PeerHbm, capacity)
    }

    #[test]
    fn init_subtracts_reserved_and_headroom() {
        let s = DeviceState::new(spec(100).with_reserved(20)).unwrap();
        assert_eq!(s.free_segments().collect::<Vec<_>>(), vec![Segment::new(0, 80)]);

        let s = DeviceState::new(spec(80 * GIB).with_headroom(GIB)).unwrap();
        assert_eq!(s.harvestable_capacity(), 79 * GIB);

        let err = DeviceState::new(spec(10).with_reserved(8).with_headroom(4)).unwrap_err();
        assert!(matches!(err, AllocError::InvalidSpec(_)));
        assert!(DeviceState::new(spec(0)).is_err());
    }

    #[test]
    fn exact_fit_preferred() {
        let free = [Segment::new(0, 100), Segment::new(200, 40)];
        let mut s = DeviceState::from_free_list(spec(300), &free).unwrap();
        assert_eq!(s.alloc_best_fit(40).unwrap(), Segment::new(200, 40));
        s.check_invariants().unwrap();
    }

    #[test]
    fn smallest_leftover_then_remainder_returned() {
        let free = [Segment::new(0, 100), Segment::new(200, 64), Segment::new(300, 65)];
        let mut s = DeviceState::from_free_list(spec(400), &free).unwrap();
        assert_eq!(s.alloc_best_fit(60).unwrap(), Segment::new(200, 60));
        assert!(s.free_segments().any(|f| f == Segment::new(260, 4)));
        s.check_invariants().unwrap();
    }

    #[test]
    fn no_capacity_when_nothing_fits() {
        let mut s = DeviceState::from_free_list(spec(100), &[Segment::new(0, 30)]).unwrap();
        assert_eq!(
            s.alloc_best_fit(31),
            Err(AllocError::NoCapacity { requested: 31 })
        );
        assert_eq!(s.alloc_best_fit(0), Err(AllocError::ZeroSize));
    }

    #[test]
    fn free_round_trip_and_coalescing() {
        let mut s = DeviceState::new(spec(100)).unwrap();
        let initial = s.clone();
        let a = s.alloc_best_fit(10).unwrap();
        assert_eq!(a, Segment::new(0, 10));
        s.free_segment(a).unwrap();
        assert_eq!(s, initial);

        let a = s.alloc_best_fit(10).unwrap();
        let b = s.alloc_best_fit(10).unwrap();
        assert_eq!(b, Segment::new(10, 10));
        s.free_segment(a).unwrap();
        s.free_segment(b).unwrap();
        assert_eq!(s.free_segments().collect::<Vec<_>>(), vec![Segment::new(0, 100)]);
    }

    #[test]
    fn unknown_or_repeated_free_is_double_free() {
        let mut s = DeviceState::new(spec(100)).unwrap();
        assert_eq!(
            s.free_segment(Segment::new(5, 3)),
            Err(AllocError::DoubleFree(Segment::new(5, 3)))
        );
        let a = s.alloc_best_fit(10).unwrap();
        s.free_segment(a).unwrap();
        assert!(s.free_segment(a).is_err());
        // wrong size for a live base
        let b = s.alloc_best_fit(10).unwrap();
        assert!(s.free_segment(Segment::new(b.base, 5)).is_err());
    }

    #[test]
    fn harvestable_tracks_alloc_and_free() {
        let mut s = DeviceState::new(spec(100).with_reserved(20)).unwrap();
        assert_eq!(s.harvestable_capacity(), 80);
        let a = s.alloc_best_fit(30).unwrap();
        assert_eq!(s.harvestable_capacity(), 50);
        s.free_segment(a).unwrap();
        assert_eq!(s.harvestable_capacity(), 80);
    }
}
