use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use super::Timestamp;

/// Source of the current time. Reads never go backwards within one run.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// A clock that moves only when told to.
#[derive(Debug, Clone)]
pub struct SimClock {
    now: Arc<AtomicI64>,
}

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        SimClock {
            now: Arc::new(AtomicI64::new(start.unix())),
        }
    }

    pub fn advance(&self, secs: u64) -> Timestamp {
        let prev = self.now.fetch_add(secs as i64, Ordering::AcqRel);
        Timestamp::from_unix(prev + secs as i64)
    }

    /// Moves the clock forward to `t`. Earlier targets are ignored.
    pub fn advance_to(&self, t: Timestamp) -> Timestamp {
        let prev = self.now.fetch_max(t.unix(), Ordering::AcqRel);
        Timestamp::from_unix(prev.max(t.unix()))
    }
}

impl Default for SimClock {
    fn default() -> Self {
        SimClock::new(Timestamp::SIM_EPOCH)
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_unix(self.now.load(Ordering::Acquire))
    }
}

/// Wall clock clamped to be non-decreasing.
#[derive(Debug, Default)]
pub struct SystemClock {
    last: AtomicI64,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock::default()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        let prev = self.last.fetch_max(wall, Ordering::AcqRel);
        Timestamp::from_unix(prev.max(wall))
    }
}
