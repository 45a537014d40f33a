//! Logical microsecond clocks.
//!
//! Simulation runs share a [`ManualClock`] that the event loop advances;
//! live runs use [`MonotonicClock`]. Both only ever move forward.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// Logical time in microseconds.
pub type Micros = u64;

pub trait Clock: Send + Sync {
    fn now_us(&self) -> Micros;
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: Micros) -> Self {
        Self {
            now: AtomicU64::new(start),
        }
    }

    /// Moves the clock to `t`. Earlier values are ignored so the clock stays monotonic.
    pub fn set(&self, t: Micros) {
        self.now.fetch_max(t, Ordering::SeqCst);
    }

    pub fn advance(&self, delta: Micros) -> Micros {
        self.now.fetch_add(delta, Ordering::SeqCst) + delta
    }
}

impl Clock for ManualClock {
    fn now_us(&self) -> Micros {
        self.now.load(Ordering::SeqCst)
    }
}

/// Wall-clock backed monotonic clock, zeroed at construction.
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_us(&self) -> Micros {
        self.origin.elapsed().as_micros() as Micros
    }
}

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}
