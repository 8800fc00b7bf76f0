//! Closed-loop clients following a timed phase schedule.
//!
//! A client sends one request, waits for the response, thinks for
//! `think_time`, and repeats. Phase boundaries change how many clients are
//! active; surplus clients finish their in-flight request before leaving.

use std::time::Duration;

use crate::error::{CoreError, Result};
use crate::model::{Jitter, ModelProfile};
use crate::request::{Outcome, RequestRecord};
use crate::sim::{SimConfig, Simulation};
use crate::time::SimTime;

/// Backoff after a rejection when the think time is zero.
pub const ZERO_THINK_RETRY: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub duration: Duration,
    pub clients: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSpec {
    pub model: String,
    pub batch_size: u32,
    pub think_time: Duration,
    pub token: Vec<u8>,
    pub payload_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
    pub client: ClientSpec,
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(CoreError::InvalidArgument("schedule has no phases".into()));
        }
        if let Some(i) = self.phases.iter().position(|p| p.duration.is_zero()) {
            return Err(CoreError::InvalidArgument(format!("phase {i} has zero duration")));
        }
        if self.client.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_duration(&self) -> Duration {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Start time and client count of every phase, followed by the end of
    /// the schedule with zero clients.
    pub fn boundaries(&self) -> Vec<(SimTime, u32)> {
        let mut t = SimTime::ZERO;
        let mut out = Vec::with_capacity(self.phases.len() + 1);
        for p in &self.phases {
            out.push((t, p.clients));
            t += p.duration;
        }
        out.push((t, 0));
        out
    }

    /// Client count scheduled at `t` (zero after the end).
    pub fn clients_at(&self, t: SimTime) -> u32 {
        self.boundaries().iter().take_while(|b| b.0 <= t).last().map_or(0, |b| b.1)
    }

    pub fn max_clients(&self) -> u32 {
        self.phases.iter().map(|p| p.clients).max().unwrap_or(0)
    }
}

/// Parameters meeting "one client is sustainable on one replica, ten are not".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Calibration {
    pub batch_size: u32,
    pub think_time: Duration,
    pub service_time: Duration,
}

impl Calibration {
    /// Requests per second one client offers when nothing queues.
    pub fn per_client_rate(&self) -> f64 {
        1.0 / (self.service_time + self.think_time).as_secs_f64()
    }

    /// Requests per second one replica can serve.
    pub fn replica_capacity(&self) -> f64 {
        1.0 / self.service_time.as_secs_f64()
    }
}

pub const DEFAULT_CALIBRATION_SERVICE: Duration = Duration::from_millis(50);

/// Picks the batch size whose service time is closest to `target_service`
/// and a think time equal to that service time. One client then offers half
/// of one replica's capacity and ten clients offer five times it.
pub fn calibrate(profile: &ModelProfile, target_service: Duration) -> Result<Calibration> {
    if !matches!(profile.jitter, Jitter::None) {
        return Err(CoreError::InvalidArgument("calibration needs a profile without jitter".into()));
    }
    if profile.base_time.is_zero() && profile.per_item_time.is_zero() {
        return Err(CoreError::InvalidArgument(format!("model `{}` has zero service time", profile.name)));
    }
    let batch_size = if profile.per_item_time.is_zero() {
        1
    } else {
        let spare = target_service.saturating_sub(profile.base_time).as_secs_f64();
        (spare / profile.per_item_time.as_secs_f64()).round().max(1.0) as u32
    };
    let service_time = profile.nominal_service_time(batch_size)?;
    let cal = Calibration { batch_size, think_time: service_time, service_time };
    let (one, ten, cap) = (cal.per_client_rate(), 10.0 * cal.per_client_rate(), cal.replica_capacity());
    if !(one < cap && cap < ten) {
        return Err(CoreError::InvalidArgument("calibration constraint cannot be met".into()));
    }
    Ok(cal)
}

#[derive(Debug, Clone, Default)]
struct Slot {
    wanted: bool,
    in_flight: bool,
    generation: u64,
    sent: u64,
    received: u64,
}

/// Bookkeeping for every closed-loop client. Send times are returned to the
/// caller, which owns the event queue; each carries a generation so sends
/// scheduled before a client was stopped can be recognised as stale.
#[derive(Debug, Clone)]
pub struct ClientPool {
    spec: ClientSpec,
    slots: Vec<Slot>,
}

/// A send the event loop should schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingSend {
    pub client: u32,
    pub at: SimTime,
    pub generation: u64,
}

impl ClientPool {
    pub fn new(spec: ClientSpec) -> Self {
        ClientPool { spec, slots: Vec::new() }
    }

    pub fn spec(&self) -> &ClientSpec {
        &self.spec
    }

    /// Clients currently wanted by the schedule.
    pub fn active(&self) -> usize {
        self.slots.iter().filter(|s| s.wanted).count()
    }

    pub fn in_flight(&self) -> usize {
        self.slots.iter().filter(|s| s.in_flight).count()
    }

    pub fn sent_and_received(&self) -> (u64, u64) {
        self.slots.iter().fold((0, 0), |(a, b), s| (a + s.sent, b + s.received))
    }

    /// Adjusts the active set to clients `0..target`. Newly started idle
    /// clients send immediately; surplus clients stop once idle.
    pub fn set_target(&mut self, target: u32, now: SimTime) -> Vec<PendingSend> {
        let target = target as usize;
        if self.slots.len() < target {
            self.slots.resize_with(target, Slot::default);
        }
        let mut sends = Vec::new();
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let want = i < target;
            if want && !slot.wanted {
                slot.wanted = true;
                if !slot.in_flight {
                    slot.generation += 1;
                    sends.push(PendingSend { client: i as u32, at: now, generation: slot.generation });
                }
            } else if !want && slot.wanted {
                slot.wanted = false;
                // invalidates any scheduled send
                slot.generation += 1;
            }
        }
        sends
    }

    /// Called when a scheduled send fires. Returns `false` if it is stale.
    pub fn begin_send(&mut self, client: u32, generation: u64) -> bool {
        match self.slots.get_mut(client as usize) {
            Some(s) if s.wanted && !s.in_flight && s.generation == generation => {
                s.in_flight = true;
                s.sent += 1;
                true
            }
            _ => false,
        }
    }

    /// Called when a response reaches the client. Returns the next send, if
    /// the client is still active.
    pub fn on_response(&mut self, client: u32, outcome: Outcome, now: SimTime) -> Option<PendingSend> {
        let think = self.spec.think_time;
        let slot = self.slots.get_mut(client as usize)?;
        debug_assert!(slot.in_flight, "response for idle client {client}");
        slot.in_flight = false;
        slot.received += 1;
        if !slot.wanted {
            return None;
        }
        let wait = match outcome {
            Outcome::Ok => think,
            _ if think.is_zero() => ZERO_THINK_RETRY,
            _ => think,
        };
        slot.generation += 1;
        Some(PendingSend { client, at: now + wait, generation: slot.generation })
    }
}

/// Drives the schedule against a simulated gateway and fleet, returning
/// every request record in delivery order.
pub fn run_clients(config: SimConfig) -> Result<Vec<RequestRecord>> {
    Ok(Simulation::new(config)?.run()?.records)
}
