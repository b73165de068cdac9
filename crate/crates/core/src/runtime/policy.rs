//! Peer-selection policies for the allocation controller.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{AllocationHints, ClientId};
use crate::memalloc::{DeviceId, DeviceState, Segment};
use crate::sim::SimTime;

/// Which controller policy picks the peer for an allocation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Globally smallest leftover over every (peer, free segment) pair.
    #[default]
    BestFit,
    /// Fewest link hops to the compute GPU, ties by best fit.
    Locality,
    /// Per-client token bucket: `rate` bytes per second, at most `burst` banked.
    Fairness { rate: f64, burst: f64 },
    /// Skip peers with `max_revocations` or more revocations in the last `window` seconds.
    Stability { window: f64, max_revocations: usize },
}

impl PolicyKind {
    /// Stability with the default 10 s churn window.
    pub fn stability(max_revocations: usize) -> Self {
        PolicyKind::Stability {
            window: 10.0,
            max_revocations,
        }
    }
}

/// A peer as seen by the controller.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub state: &'a DeviceState,
    /// Bytes the peer may still hand out under its current availability limit.
    pub allowance: u64,
    pub hops: u32,
}

impl Candidate<'_> {
    fn fit(&self, size: u64) -> Option<Segment> {
        if self.allowance < size {
            return None;
        }
        self.state.best_fit(size)
    }
}

#[derive(Debug, Clone)]
struct TokenBucket {
    tokens: f64,
    last: SimTime,
}

/// Mutable policy bookkeeping: token buckets and per-device churn history.
#[derive(Debug, Clone, Default)]
pub struct PolicyState {
    pub kind: PolicyKind,
    buckets: BTreeMap<ClientId, TokenBucket>,
    revocations: BTreeMap<DeviceId, VecDeque<SimTime>>,
}

impl PolicyState {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn record_revocation(&mut self, device: DeviceId, at: SimTime) {
        self.revocations.entry(device).or_default().push_back(at);
    }

    /// Revocations on `device` within `(now - window, now]`.
    pub fn recent_revocations(&self, device: DeviceId, now: SimTime, window: f64) -> usize {
        self.revocations
            .get(&device)
            .map(|times| times.iter().filter(|&&t| t > now - window && t <= now).count())
            .unwrap_or(0)
    }

    fn refill(&mut self, client: ClientId, now: SimTime, rate: f64, burst: f64) -> &mut TokenBucket {
        let bucket = self.buckets.entry(client).or_insert(TokenBucket {
            tokens: burst,
            last: now,
        });
        let elapsed = (now - bucket.last).max(0.0);
        bucket.tokens = (bucket.tokens + elapsed * rate).min(burst);
        bucket.last = now;
        bucket
    }

    /// Remaining fairness budget of `client` at `now` (infinite for other policies).
    pub fn budget(&mut self, client: ClientId, now: SimTime) -> f64 {
        match self.kind {
            PolicyKind::Fairness { rate, burst } => self.refill(client, now, rate, burst).tokens,
            _ => f64::INFINITY,
        }
    }

    /// Picks the peer for an allocation of `size` bytes, or `None` when no
    /// candidate is admissible. Fairness budgets are charged on success.
    pub fn select_peer(
        &mut self,
        candidates: &[Candidate<'_>],
        size: u64,
        hints: &AllocationHints,
        now: SimTime,
    ) -> Option<(DeviceId, Segment)> {
        if size == 0 || candidates.is_empty() {
            return None;
        }
        let admissible: Vec<&Candidate<'_>> = match self.kind.clone() {
            PolicyKind::Stability {
                window,
                max_revocations,
            } => candidates
                .iter()
                .filter(|c| self.recent_revocations(c.state.id(), now, window) < max_revocations)
                .collect(),
            PolicyKind::Fairness { rate, burst } => {
                let bucket = self.refill(hints.client_id, now, rate, burst);
                if bucket.tokens < size as f64 {
                    return None;
                }
                candidates.iter().collect()
            }
            _ => candidates.iter().collect(),
        };

        let preferred: Vec<&Candidate<'_>> = match &hints.preferred_devices {
            Some(pref) if !pref.is_empty() => admissible
                .iter()
                .copied()
                .filter(|c| pref.contains(&c.state.id()))
                .collect(),
            _ => Vec::new(),
        };
        let locality = matches!(self.kind, PolicyKind::Locality);
        let choice = pick(&preferred, size, locality).or_else(|| pick(&admissible, size, locality));

        if let (Some(_), PolicyKind::Fairness { rate, burst }) = (&choice, self.kind.clone()) {
            self.refill(hints.client_id, now, rate, burst).tokens -= size as f64;
        }
        choice
    }
}

fn pick(candidates: &[&Candidate<'_>], size: u64, by_hops: bool) -> Option<(DeviceId, Segment)> {
    candidates
        .iter()
        .filter_map(|c| c.fit(size).map(|seg| (c, seg)))
        .min_by_key(|(c, seg)| {
            let hops = if by_hops { c.hops } else { 0 };
            (hops, seg.size - size, c.state.id(), seg.base)
        })
        .map(|(c, seg)| (c.state.id(), Segment::new(seg.base, size)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memalloc::{DeviceSpec, Tier};
    use crate::GIB;

    fn peer(id: u32, capacity: u64) -> DeviceState {
        DeviceState::new(DeviceSpec::new(id, Tier::PeerHbm, capacity)).unwrap()
    }

    fn cand(state: &DeviceState, hops: u32) -> Candidate<'_> {
        Candidate {
            state,
            allowance: state.harvestable_capacity(),
            hops,
        }
    }

    #[test]
    fn single_candidate_under_every_policy() {
        let d = peer(1, 100);
        let policies = [
            PolicyKind::BestFit,
            PolicyKind::Locality,
            PolicyKind::Fairness {
                rate: 1000.0,
                burst: 1000.0,
            },
            PolicyKind::stability(3),
        ];
        for kind in policies {
            let mut p = PolicyState::new(kind.clone());
            let got = p.select_peer(&[cand(&d, 1)], 10, &AllocationHints::default(), 0.0);
            assert_eq!(got.map(|g| g.0), Some(DeviceId(1)), "{kind:?}");
        }
    }

    #[test]
    fn best_fit_prefers_smaller_leftover_across_devices() {
        let big = peer(1, 10 * GIB);
        let small = peer(2, 2 * GIB);
        let mut p = PolicyState::new(PolicyKind::BestFit);
        let got = p.select_peer(
            &[cand(&big, 1), cand(&small, 1)],
            3 * GIB / 2,
            &AllocationHints::default(),
            0.0,
        );
        assert_eq!(got.unwrap().0, DeviceId(2));
    }

    #[test]
    fn fairness_zero_budget_rejects() {
        let d = peer(1, 100);
        let mut p = PolicyState::new(PolicyKind::Fairness {
            rate: 0.0,
            burst: 0.0,
        });
        assert_eq!(
            p.select_peer(&[cand(&d, 1)], 10, &AllocationHints::default(), 5.0),
            None
        );
    }

    #[test]
    fn fairness_bucket_refills_at_rate() {
        let d = peer(1, 1000);
        let mut p = PolicyState::new(PolicyKind::Fairness {
            rate: 10.0,
            burst: 20.0,
        });
        let h = AllocationHints::default();
        assert!(p.select_peer(&[cand(&d, 1)], 20, &h, 0.0).is_some());
        assert!(p.select_peer(&[cand(&d, 1)], 10, &h, 0.5).is_none());
        assert!(p.select_peer(&[cand(&d, 1)], 10, &h, 1.0).is_some());
        // other clients have their own bucket
        let other = AllocationHints {
            client_id: ClientId(9),
            ..AllocationHints::default()
        };
        assert!(p.select_peer(&[cand(&d, 1)], 20, &other, 1.0).is_some());
    }

    #[test]
    fn locality_prefers_fewer_hops() {
        let near = peer(1, 100);
        let far = peer(2, 10);
        let mut p = PolicyState::new(PolicyKind::Locality);
        let got = p.select_peer(&[cand(&far, 2), cand(&near, 1)], 10, &AllocationHints::default(), 0.0);
        assert_eq!(got.unwrap().0, DeviceId(1));
        // best fit alone would pick the exact fit on the far peer
        let mut p = PolicyState::new(PolicyKind::BestFit);
        let got = p.select_peer(&[cand(&far, 2), cand(&near, 1)], 10, &AllocationHints::default(), 0.0);
        assert_eq!(got.unwrap().0, DeviceId(2));
    }

    #[test]
    fn stability_skips_churny_peers() {
        let a = peer(1, 10);
        let b = peer(2, 100);
        let mut p = PolicyState::new(PolicyKind::stability(2));
        p.record_revocation(DeviceId(1), 1.0);
        p.record_revocation(DeviceId(1), 2.0);
        let h = AllocationHints::default();
        let got = p.select_peer(&[cand(&a, 1), cand(&b, 1)], 10, &h, 5.0);
        assert_eq!(got.unwrap().0, DeviceId(2));
        // outside the window the history no longer counts
        let got = p.select_peer(&[cand(&a, 1), cand(&b, 1)], 10, &h, 20.0);
        assert_eq!(got.unwrap().0, DeviceId(1));
    }

    #[test]
    fn preferred_devices_honored_then_fallback() {
        let a = peer(1, 100);
        let b = peer(2, 10);
        let mut p = PolicyState::new(PolicyKind::BestFit);
        let h = AllocationHints {
            preferred_devices: Some(vec![DeviceId(1)]),
            ..AllocationHints::default()
        };
        assert_eq!(p.select_peer(&[cand(&a, 1), cand(&b, 1)], 10, &h, 0.0).unwrap().0, DeviceId(1));
        let h = AllocationHints {
            preferred_devices: Some(vec![DeviceId(2)]),
            ..AllocationHints::default()
        };
        assert_eq!(p.select_peer(&[cand(&a, 1), cand(&b, 1)], 50, &h, 0.0).unwrap().0, DeviceId(1));
    }

    #[test]
    fn allowance_limits_admission() {
        let d = peer(1, 100);
        let mut p = PolicyState::new(PolicyKind::BestFit);
        let c = Candidate {
            state: &d,
            allowance: 5,
            hops: 1,
        };
        assert!(p.select_peer(&[c], 10, &AllocationHints::default(), 0.0).is_none());
    }
}
