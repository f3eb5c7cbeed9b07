use std::time::{Duration, Instant};

use thalamus_core::Timestamp;

/// Maps the monotonic clock onto Unix epoch milliseconds. Anchored once at
/// startup so hub time never jumps with wall-clock adjustments.
#[derive(Debug, Clone, Copy)]
pub struct HubClock {
    base_instant: Instant,
    base_ms: u64,
}

impl HubClock {
    pub fn new() -> Self {
        HubClock {
            base_instant: Instant::now(),
            base_ms: Timestamp::now().as_millis(),
        }
    }

    pub fn now(&self) -> Timestamp {
        Timestamp(self.base_ms + self.base_instant.elapsed().as_millis() as u64)
    }

    /// The monotonic instant at which `now()` first reaches `t`.
    pub fn instant_at(&self, t: Timestamp) -> Instant {
        self.base_instant + Duration::from_millis(t.0.saturating_sub(self.base_ms))
    }

    pub fn started(&self) -> Instant {
        self.base_instant
    }
}

impl Default for HubClock {
    fn default() -> Self {
        Self::new()
    }
}
