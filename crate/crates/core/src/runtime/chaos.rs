//! Adversarial revocation schedules for correctness testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{HarvestHandle, RevokeReason, Runtime};

/// Schedules a revocation for every allocation it is shown, after an
/// exponentially distributed delay. A mean delay of zero revokes right away.
#[derive(Debug, Clone)]
pub struct RevocationChaos {
    rng: ChaCha8Rng,
    mean_delay: f64,
    /// Probability that a given allocation is targeted at all.
    pub coverage: f64,
}

impl RevocationChaos {
    pub fn new(seed: u64, mean_delay: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mean_delay: mean_delay.max(0.0),
            coverage: 1.0,
        }
    }

    pub fn next_delay(&mut self) -> f64 {
        if self.mean_delay == 0.0 {
            return 0.0;
        }
        Exp::new(1.0 / self.mean_delay)
            .expect("positive rate")
            .sample(&mut self.rng)
    }

    pub fn on_alloc(&mut self, runtime: &mut Runtime, handle: HarvestHandle) {
        if self.coverage < 1.0 && !self.rng.random_bool(self.coverage.clamp(0.0, 1.0)) {
            return;
        }
        let at = runtime.now() + self.next_delay();
        runtime.schedule_revoke(at, handle, RevokeReason::Policy);
    }
}
