use harvest_sim::memalloc::*;
use proptest::prelude::*;

/// Enumerates every free segment and keeps the one with the smallest
/// leftover, lowest base on ties.
fn oracle(free: &[Segment], size: u64) -> Option<Segment> {
    free.iter()
        .filter(|s| s.size >= size)
        .min_by_key(|s| (s.size - size, s.base))
        .copied()
}

/// Disjoint, non-adjacent free segments inside `capacity`, built from a list
/// of (gap, length) pairs.
fn free_list(parts: &[(u64, u64)]) -> Vec<Segment> {
    let mut cursor = 0;
    let mut out = Vec::new();
    for &(gap, len) in parts {
        let base = cursor + gap + if out.is_empty() { 0 } else { 1 };
        out.push(Segment::new(base, len));
        cursor = base + len;
    }
    out
}

fn device(capacity: u64) -> DeviceSpec {
    DeviceSpec::new(1, Tier::PeerHbm, capacity)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn best_fit_matches_exhaustive_search(
        parts in prop::collection::vec((0u64..64, 1u64..256), 0..12),
        size in 1u64..300,
    ) {
        let free = free_list(&parts);
        let capacity = free.last().map_or(1, |s| s.end() + 1);
        let mut state = DeviceState::from_free_list(device(capacity), &free).unwrap();
        let expected = oracle(&free, size);
        prop_assert_eq!(state.best_fit(size), expected);
        let before = state.harvestable_capacity();
        match state.alloc_best_fit(size) {
            Ok(seg) => {
                let chosen = expected.unwrap();
                prop_assert_eq!(seg, Segment::new(chosen.base, size));
                prop_assert_eq!(state.harvestable_capacity(), before - size);
                let remainder = state.free_segments().find(|s| s.base == chosen.base + size);
                if chosen.size > size {
                    prop_assert_eq!(remainder, Some(Segment::new(chosen.base + size, chosen.size - size)));
                }
            }
            Err(e) => {
                prop_assert!(expected.is_none());
                prop_assert_eq!(e, AllocError::NoCapacity { requested: size });
                prop_assert_eq!(state.harvestable_capacity(), before);
            }
        }
        prop_assert!(state.check_invariants().is_ok());
    }

    #[test]
    fn random_alloc_free_sequences_keep_invariants(
        ops in prop::collection::vec((any::<bool>(), 1u64..5000, any::<prop::sample::Index>()), 1..200),
    ) {
        let mut state = DeviceState::new(device(100_000).with_reserved(1000)).unwrap();
        let mut live: Vec<Segment> = Vec::new();
        for (alloc, size, pick) in ops {
            if alloc || live.is_empty() {
                if let Ok(seg) = state.alloc_best_fit(size) {
                    live.push(seg);
                }
            } else {
                let seg = live.swap_remove(pick.index(live.len()));
                state.free_segment(seg).unwrap();
                prop_assert_eq!(state.free_segment(seg), Err(AllocError::DoubleFree(seg)));
            }
            prop_assert!(state.check_invariants().is_ok());
            prop_assert_eq!(state.allocated_bytes(), live.iter().map(|s| s.size).sum::<u64>());
        }
        for seg in live.drain(..) {
            state.free_segment(seg).unwrap();
        }
        prop_assert_eq!(state.free_segments().collect::<Vec<_>>(), vec![Segment::new(0, 99_000)]);
    }
}

#[test]
fn exact_fit_beats_larger_earlier_segment() {
    let free = [Segment::new(0, 100), Segment::new(200, 40), Segment::new(300, 50)];
    let mut state = DeviceState::from_free_list(device(400), &free).unwrap();
    assert_eq!(state.alloc_best_fit(40).unwrap(), Segment::new(200, 40));
    assert_eq!(state.free_segments().count(), 2);
}

#[test]
fn ties_go_to_the_lowest_address() {
    let free = [Segment::new(10, 64), Segment::new(100, 64)];
    let state = DeviceState::from_free_list(device(200), &free).unwrap();
    assert_eq!(state.best_fit(60), Some(Segment::new(10, 64)));
}

#[test]
fn headroom_and_reserve_shrink_usable_capacity() {
    let state = DeviceState::new(device(1000).with_reserved(100).with_headroom(50)).unwrap();
    assert_eq!(state.harvestable_capacity(), 850);
    assert!(DeviceState::new(device(100).with_reserved(90).with_headroom(20)).is_err());
}

#[test]
fn fragmentation_reflects_largest_hole() {
    let free = [Segment::new(0, 30), Segment::new(50, 10)];
    let state = DeviceState::from_free_list(device(100), &free).unwrap();
    assert!((state.fragmentation() - 0.25).abs() < 1e-12);
    assert_eq!(state.largest_free(), 30);
}
