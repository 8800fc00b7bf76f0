//! Integer-nanosecond time.
//!
//! Every timestamp in the system is a [`SimTime`]: nanoseconds since the start
//! of the experiment. Virtual clocks only move when the event loop says so;
//! wall clocks map elapsed real time (optionally compressed) onto the same
//! representation.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    /// Elapsed time since `earlier`, saturating at zero.
    pub fn saturating_since(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }

    pub fn saturating_sub(self, d: Duration) -> SimTime {
        SimTime(self.0.saturating_sub(nanos(d)))
    }
}

/// Duration as whole nanoseconds, saturating at `u64::MAX`.
pub fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0.saturating_add(nanos(rhs)))
    }
}

impl AddAssign<Duration> for SimTime {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = Duration;

    /// Panics in debug builds if `rhs` is later than `self`.
    fn sub(self, rhs: SimTime) -> Duration {
        debug_assert!(rhs.0 <= self.0, "SimTime subtraction underflow");
        Duration::from_nanos(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockMode {
    Virtual,
    /// `scale` virtual nanoseconds elapse per real nanosecond.
    WallClock { scale: f64 },
}

/// Source of "now" for the whole system.
#[derive(Debug, Clone)]
pub struct TimeSource {
    mode: ClockMode,
    origin: Instant,
    last: SimTime,
}

impl TimeSource {
    pub fn virtual_clock() -> Self {
        TimeSource { mode: ClockMode::Virtual, origin: Instant::now(), last: SimTime::ZERO }
    }

    pub fn wall_clock(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(CoreError::InvalidArgument(format!("time scale must be positive, got {scale}")));
        }
        Ok(TimeSource { mode: ClockMode::WallClock { scale }, origin: Instant::now(), last: SimTime::ZERO })
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    /// Current time. Never returns a value smaller than a previous read.
    pub fn now(&mut self) -> SimTime {
        if let ClockMode::WallClock { scale } = self.mode {
            let elapsed = self.origin.elapsed().as_nanos() as f64 * scale;
            let t = SimTime(elapsed as u64);
            if t > self.last {
                self.last = t;
            }
        }
        self.last
    }

    /// Moves a virtual clock forward. Wall clocks ignore the call apart from
    /// the monotonicity check.
    pub fn advance_to(&mut self, t: SimTime) -> Result<()> {
        if t < self.last {
            return Err(CoreError::NonMonotonicTime { now: t.as_nanos(), last: self.last.as_nanos() });
        }
        if self.mode == ClockMode::Virtual {
            self.last = t;
        }
        Ok(())
    }

    /// Real time remaining until virtual time `t` is reached. Zero for
    /// virtual clocks and for instants already in the past.
    pub fn real_delay_until(&mut self, t: SimTime) -> Duration {
        match self.mode {
            ClockMode::Virtual => Duration::ZERO,
            ClockMode::WallClock { scale } => {
                let now = self.now();
                let ahead = t.as_nanos().saturating_sub(now.as_nanos());
                Duration::from_nanos((ahead as f64 / scale).ceil() as u64)
            }
        }
    }
}
