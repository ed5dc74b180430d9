//! Injectable time sources.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync + Debug {
    /// Milliseconds since the clock's origin. Never decreases.
    fn now_ms(&self) -> u64;

    /// Lets `ms` milliseconds pass. Simulated clocks jump; the wall clock sleeps.
    fn advance(&self, ms: u64);
}

/// Simulated clock that only moves when advanced.
#[derive(Debug, Default)]
pub struct SimClock {
    now: AtomicU64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(ms: u64) -> Self {
        SimClock { now: AtomicU64::new(ms) }
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock { origin: Instant::now() }
    }
}

impl WallClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn advance(&self, ms: u64) {
        if ms > 0 {
            std::thread::sleep(Duration::from_millis(ms));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_moves_only_when_advanced() {
        let c = SimClock::starting_at(5);
        assert_eq!(c.now_ms(), 5);
        c.advance(9400);
        assert_eq!(c.now_ms(), 9405);
    }

    #[test]
    fn wall_clock_sleeps() {
        let c = WallClock::new();
        let t0 = c.now_ms();
        c.advance(15);
        assert!(c.now_ms() >= t0 + 15);
    }
}
