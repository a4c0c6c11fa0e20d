//! Experiment clocks and the stop signal shared by control threads.
//!
//! Times are seconds since the experiment started.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};

pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Host monotonic clock.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
    epoch: f64,
}

impl WallClock {
    pub fn start() -> Self {
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            origin: Instant::now(),
            epoch,
        }
    }

    /// UNIX time at which the clock started.
    pub fn epoch(&self) -> f64 {
        self.epoch
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Clock advanced explicitly by the discrete-event engine.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(t: f64) -> Self {
        Self(AtomicU64::new(t.to_bits()))
    }

    pub fn set(&self, t: f64) {
        self.0.store(t.to_bits(), Ordering::Release);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Acquire))
    }
}

/// One-way flag that sleeping threads can wait on.
#[derive(Debug, Default)]
pub struct StopSignal {
    set: Mutex<bool>,
    cv: Condvar,
}

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        *self.set.lock() = true;
        self.cv.notify_all();
    }

    pub fn is_set(&self) -> bool {
        *self.set.lock()
    }

    /// Sleeps up to `timeout`; returns true if the signal is set.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let mut set = self.set.lock();
        if !*set {
            self.cv.wait_for(&mut set, timeout);
        }
        *set
    }
}
