//! Simulated GPU inference servers.
//!
//! Each [`BackendInstance`] is one GPU: a bounded FIFO queue feeding a single
//! execution unit. Requests run one at a time, in arrival order, for a
//! service time drawn from the model profile. The instance keeps its busy
//! intervals so utilization can be queried over any window.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelRegistry;
use crate::request::{BackendTiming, RequestRecord};
use crate::time::{nanos, SimTime};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;
pub const DEFAULT_STARTUP_DELAY: Duration = Duration::from_secs(10);

/// Backend identifier. Displays as `gpu-NNNN` so numeric and lexicographic
/// order agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BackendId(pub u32);

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpu-{:04}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendState {
    Starting,
    Ready,
    Draining,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    RejectedCapacity,
}

#[derive(Debug, Clone)]
struct Queued {
    pending: RequestRecord,
    t_enqueue: SimTime,
}

#[derive(Debug, Clone)]
struct Running {
    job: Queued,
    start: SimTime,
    end: SimTime,
}

#[derive(Debug, Clone)]
pub struct BackendInstance {
    id: BackendId,
    state: BackendState,
    spawned_at: SimTime,
    ready_at: SimTime,
    drain_at: Option<SimTime>,
    stopped_at: Option<SimTime>,
    queue: VecDeque<Queued>,
    queue_capacity: usize,
    running: Option<Running>,
    busy_until: SimTime,
    busy_accumulated: Duration,
    busy_intervals: Vec<(SimTime, SimTime)>,
    accepted_count: u64,
    served_count: u64,
    last_advance: SimTime,
    rng: ChaCha8Rng,
    models: Arc<ModelRegistry>,
}

impl BackendInstance {
    /// New instance in `Starting`, becoming `Ready` at `now + startup_delay`.
    /// A zero delay yields an instance that is `Ready` immediately.
    pub fn spawn(
        id: BackendId,
        startup_delay: Duration,
        now: SimTime,
        queue_capacity: usize,
        models: Arc<ModelRegistry>,
        seed: u64,
    ) -> Self {
        let ready_at = now + startup_delay;
        let state = if startup_delay.is_zero() { BackendState::Ready } else { BackendState::Starting };
        let stream = seed ^ u64::from(id.0).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        BackendInstance {
            id,
            state,
            spawned_at: now,
            ready_at,
            drain_at: None,
            stopped_at: None,
            queue: VecDeque::new(),
            queue_capacity,
            running: None,
            busy_until: now,
            busy_accumulated: Duration::ZERO,
            busy_intervals: Vec::new(),
            accepted_count: 0,
            served_count: 0,
            last_advance: now,
            rng: ChaCha8Rng::seed_from_u64(stream),
            models,
        }
    }

    pub fn id(&self) -> BackendId {
        self.id
    }

    pub fn state(&self) -> BackendState {
        self.state
    }

    pub fn spawned_at(&self) -> SimTime {
        self.spawned_at
    }

    pub fn ready_at(&self) -> SimTime {
        self.ready_at
    }

    pub fn stopped_at(&self) -> Option<SimTime> {
        self.stopped_at
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some()
    }

    pub fn busy_accumulated(&self) -> Duration {
        self.busy_accumulated
    }

    pub fn served_count(&self) -> u64 {
        self.served_count
    }

    pub fn accepted_count(&self) -> u64 {
        self.accepted_count
    }

    /// Requests accepted but not yet completed.
    pub fn outstanding(&self) -> usize {
        self.queue.len() + usize::from(self.running.is_some())
    }

    /// Admits a request into the FIFO queue.
    ///
    /// Only `Ready` instances accept work: `Starting` and `Draining` yield
    /// [`CoreError::InvalidState`] (a routing error), `Stopped` likewise.
    pub fn enqueue(&mut self, pending: RequestRecord, now: SimTime) -> Result<EnqueueOutcome> {
        self.promote(now);
        if self.state != BackendState::Ready {
            return Err(CoreError::InvalidState { id: self.id, state: self.state });
        }
        if self.models.get(&pending.model).is_none() {
            return Err(CoreError::UnknownModel(pending.model));
        }
        if self.queue.len() >= self.queue_capacity {
            return Ok(EnqueueOutcome::RejectedCapacity);
        }
        self.queue.push_back(Queued { pending, t_enqueue: now });
        self.accepted_count += 1;
        if self.running.is_none() {
            self.start_next();
        }
        Ok(EnqueueOutcome::Accepted)
    }

    fn promote(&mut self, now: SimTime) {
        if self.state == BackendState::Starting && now >= self.ready_at {
            self.state = BackendState::Ready;
        }
    }

    fn start_next(&mut self) {
        debug_assert!(self.running.is_none());
        let Some(job) = self.queue.pop_front() else { return };
        let start = job.t_enqueue.max(self.busy_until);
        let service = match self.models.get(&job.pending.model) {
            Some(profile) => profile.sample_service_time(job.pending.batch_size, &mut self.rng).unwrap_or_default(),
            None => Duration::ZERO,
        };
        let end = start + service;
        match self.busy_intervals.last_mut() {
            Some(last) if last.1 == start => last.1 = end,
            _ => self.busy_intervals.push((start, end)),
        }
        self.busy_until = end;
        self.running = Some(Running { job, start, end });
    }

    /// Runs the execution unit up to `now` and returns every request whose
    /// compute finished at or before `now`, in completion order.
    pub fn advance(&mut self, now: SimTime) -> Vec<RequestRecord> {
        debug_assert!(now >= self.last_advance, "advance must not go back in time");
        self.last_advance = self.last_advance.max(now);
        self.promote(now);
        let mut done = Vec::new();
        while let Some(run) = self.running.take() {
            if run.end > now {
                self.running = Some(run);
                break;
            }
            let Running { job, start, end } = run;
            let mut record = job.pending;
            record.backend = Some(BackendTiming {
                backend_id: self.id,
                t_enqueue: job.t_enqueue,
                t_compute_start: start,
                t_compute_end: end,
            });
            self.busy_accumulated += end - start;
            self.served_count += 1;
            done.push(record);
            self.start_next();
        }
        if self.state == BackendState::Draining && self.running.is_none() && self.queue.is_empty() {
            self.state = BackendState::Stopped;
            let drained = self.drain_at.unwrap_or(now);
            self.stopped_at = Some(drained.max(self.busy_until));
        }
        done
    }

    /// Earliest future instant at which `advance` would change something.
    pub fn next_event_time(&self) -> Option<SimTime> {
        match self.state {
            BackendState::Starting => Some(self.ready_at),
            BackendState::Stopped => None,
            _ => self.running.as_ref().map(|r| r.end),
        }
    }

    /// Stops accepting work; queued requests still run to completion.
    /// A `Starting` instance has nothing queued and stops immediately.
    pub fn drain(&mut self, now: SimTime) -> Result<()> {
        self.promote(now);
        match self.state {
            BackendState::Starting => {
                self.state = BackendState::Stopped;
                self.drain_at = Some(now);
                self.stopped_at = Some(now);
                Ok(())
            }
            BackendState::Ready => {
                self.state = BackendState::Draining;
                self.drain_at = Some(now);
                if self.running.is_none() && self.queue.is_empty() {
                    self.state = BackendState::Stopped;
                    self.stopped_at = Some(now.max(self.busy_until));
                }
                Ok(())
            }
            BackendState::Draining => Ok(()),
            BackendState::Stopped => Err(CoreError::InvalidState { id: self.id, state: self.state }),
        }
    }

    /// Busy time overlapping `[t0, t1]`.
    pub fn busy_time(&self, t0: SimTime, t1: SimTime) -> Duration {
        if t1 <= t0 {
            return Duration::ZERO;
        }
        let first = self.busy_intervals.partition_point(|&(_, end)| end <= t0);
        self.busy_intervals[first..]
            .iter()
            .take_while(|&&(start, _)| start < t1)
            .map(|&(start, end)| end.min(t1).saturating_since(start.max(t0)))
            .sum()
    }

    /// Fraction of `[t0, t1]` during which the execution unit was busy.
    pub fn utilization(&self, t0: SimTime, t1: SimTime) -> Result<f64> {
        if t0 >= t1 {
            return Err(CoreError::InvalidArgument(format!("utilization window [{t0}, {t1}] is empty")));
        }
        let busy = nanos(self.busy_time(t0, t1)) as f64;
        Ok((busy / nanos(t1 - t0) as f64).clamp(0.0, 1.0))
    }

    /// Portion of `[t0, t1]` during which this instance existed (spawned and
    /// not yet stopped).
    pub fn lifetime_overlap(&self, t0: SimTime, t1: SimTime) -> Duration {
        let from = self.spawned_at.max(t0);
        let to = self.stopped_at.unwrap_or(SimTime::MAX).min(t1);
        to.saturating_since(from)
    }
}

/// Ordered collection of backend instances plus the knobs used to create new
/// ones. Stopped instances are retained for accounting.
#[derive(Debug, Clone)]
pub struct Fleet {
    instances: BTreeMap<BackendId, BackendInstance>,
    next_id: u32,
    startup_delay: Duration,
    queue_capacity: usize,
    models: Arc<ModelRegistry>,
    seed: u64,
}

impl Fleet {
    pub fn new(models: Arc<ModelRegistry>, startup_delay: Duration, queue_capacity: usize, seed: u64) -> Self {
        Fleet { instances: BTreeMap::new(), next_id: 0, startup_delay, queue_capacity, models, seed }
    }

    pub fn models(&self) -> &Arc<ModelRegistry> {
        &self.models
    }

    /// Spawns a new instance with the fleet's default startup delay.
    pub fn spawn(&mut self, now: SimTime) -> BackendId {
        let id = BackendId(self.next_id);
        self.spawn_with(id, self.startup_delay, now).expect("fresh ids are unique");
        id
    }

    pub fn spawn_with(&mut self, id: BackendId, startup_delay: Duration, now: SimTime) -> Result<()> {
        if self.instances.contains_key(&id) {
            return Err(CoreError::InvalidArgument(format!("backend {id} already exists")));
        }
        let inst = BackendInstance::spawn(id, startup_delay, now, self.queue_capacity, self.models.clone(), self.seed);
        self.instances.insert(id, inst);
        self.next_id = self.next_id.max(id.0 + 1);
        Ok(())
    }

    pub fn get(&self, id: BackendId) -> Option<&BackendInstance> {
        self.instances.get(&id)
    }

    pub fn get_mut(&mut self, id: BackendId) -> Option<&mut BackendInstance> {
        self.instances.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackendInstance> {
        self.instances.values()
    }

    /// `(id, state)` of every instance that has not stopped, in id order.
    pub fn snapshot(&self) -> Vec<(BackendId, BackendState)> {
        self.instances.values().filter(|b| b.state != BackendState::Stopped).map(|b| (b.id, b.state)).collect()
    }

    pub fn count(&self, state: BackendState) -> usize {
        self.instances.values().filter(|b| b.state == state).count()
    }

    /// Replicas that count toward the desired size: `Ready` + `Starting`.
    pub fn active_replicas(&self) -> usize {
        self.count(BackendState::Ready) + self.count(BackendState::Starting)
    }

    pub fn advance(&mut self, now: SimTime) -> Vec<RequestRecord> {
        self.instances.values_mut().flat_map(|b| b.advance(now)).collect()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.instances.values().filter_map(BackendInstance::next_event_time).min()
    }

    /// Drains the `n` highest-id active instances. Returns their ids.
    pub fn drain_highest(&mut self, n: usize, now: SimTime) -> Vec<BackendId> {
        let victims: Vec<BackendId> = self
            .instances
            .values()
            .rev()
            .filter(|b| matches!(b.state, BackendState::Ready | BackendState::Starting))
            .take(n)
            .map(|b| b.id)
            .collect();
        for id in &victims {
            if let Some(b) = self.instances.get_mut(id) {
                let _ = b.drain(now);
            }
        }
        victims
    }

    /// Total requests accepted and completed across the fleet.
    pub fn accepted_and_served(&self) -> (u64, u64) {
        self.instances.values().fold((0, 0), |(a, s), b| (a + b.accepted_count, s + b.served_count))
    }

    /// Total outstanding (queued or running) requests.
    pub fn outstanding(&self) -> usize {
        self.instances.values().map(BackendInstance::outstanding).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelProfile;
    use crate::request::{InferenceRequest, RequestId};

    fn models(service_ms: u64) -> Arc<ModelRegistry> {
        Arc::new(
            ModelRegistry::new([ModelProfile::deterministic("m", Duration::from_millis(service_ms), Duration::ZERO)])
                .unwrap(),
        )
    }

    fn pending(id: u64, at: SimTime) -> RequestRecord {
        let req = InferenceRequest::new(RequestId(id), "m", 1, vec![]).unwrap();
        RequestRecord::new(&req, at, at)
    }

    fn ready(service_ms: u64, cap: usize) -> BackendInstance {
        BackendInstance::spawn(BackendId(0), Duration::ZERO, SimTime::ZERO, cap, models(service_ms), 1)
    }

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    #[test]
    fn startup_delay_gates_readiness() {
        let mut b = BackendInstance::spawn(BackendId(0), Duration::from_secs(10), SimTime::ZERO, 10, models(50), 1);
        assert_eq!(b.state(), BackendState::Starting);
        assert!(b.enqueue(pending(1, SimTime::from_secs(5)), SimTime::from_secs(5)).is_err());
        b.advance(SimTime::from_secs(10));
        assert_eq!(b.state(), BackendState::Ready);
        assert_eq!(b.enqueue(pending(2, SimTime::from_secs(10)), SimTime::from_secs(10)).unwrap(), EnqueueOutcome::Accepted);
    }

    #[test]
    fn zero_delay_is_ready_immediately() {
        assert_eq!(ready(50, 10).state(), BackendState::Ready);
    }

    #[test]
    fn capacity_boundary() {
        let mut b = ready(50, 100);
        // the first request goes straight to the execution unit
        b.enqueue(pending(0, ms(0)), ms(0)).unwrap();
        for i in 1..=100 {
            assert_eq!(b.enqueue(pending(i, ms(0)), ms(0)).unwrap(), EnqueueOutcome::Accepted);
        }
        assert_eq!(b.queue_len(), 100);
        assert_eq!(b.enqueue(pending(101, ms(0)), ms(0)).unwrap(), EnqueueOutcome::RejectedCapacity);
    }

    #[test]
    fn fifo_hand_simulation() {
        let mut b = ready(50, 10);
        for i in 0..3 {
            b.enqueue(pending(i, ms(0)), ms(0)).unwrap();
        }
        let done = b.advance(ms(150));
        let ids: Vec<u64> = done.iter().map(|r| r.request_id.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let queue: Vec<u64> = done.iter().map(|r| r.queue_time().unwrap().as_millis() as u64).collect();
        let ends: Vec<SimTime> = done.iter().map(|r| r.backend.unwrap().t_compute_end).collect();
        assert_eq!(queue, vec![0, 50, 100]);
        assert_eq!(ends, vec![ms(50), ms(100), ms(150)]);
    }

    #[test]
    fn advance_returns_only_finished() {
        let mut b = ready(50, 10);
        b.enqueue(pending(0, ms(0)), ms(0)).unwrap();
        assert!(b.advance(ms(49)).is_empty());
        let done = b.advance(ms(50));
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].compute_time().unwrap(), Duration::from_millis(50));
        assert_eq!(done[0].queue_time().unwrap(), Duration::ZERO);
    }

    #[test]
    fn lazy_advance_keeps_exact_start_times() {
        let mut b = ready(50, 10);
        b.enqueue(pending(0, ms(0)), ms(0)).unwrap();
        // second request arrives after the first finished but before any advance
        b.enqueue(pending(1, ms(70)), ms(70)).unwrap();
        let done = b.advance(ms(200));
        assert_eq!(done[1].backend.unwrap().t_compute_start, ms(70));
        assert_eq!(done[1].queue_time().unwrap(), Duration::ZERO);
    }

    #[test]
    fn utilization_bounds() {
        let mut b = ready(50, 100);
        assert_eq!(b.utilization(ms(0), ms(1000)).unwrap(), 0.0);
        for i in 0..20 {
            b.enqueue(pending(i, ms(0)), ms(0)).unwrap();
        }
        b.advance(ms(1000));
        assert_eq!(b.utilization(ms(0), ms(1000)).unwrap(), 1.0);
        assert_eq!(b.utilization(ms(0), ms(2000)).unwrap(), 0.5);
        assert!(b.utilization(ms(5), ms(5)).is_err());
        assert!(b.busy_accumulated() <= Duration::from_millis(1000));
    }

    #[test]
    fn drain_completes_queued_work() {
        let mut b = ready(50, 10);
        for i in 0..5 {
            b.enqueue(pending(i, ms(0)), ms(0)).unwrap();
        }
        b.drain(ms(10)).unwrap();
        assert_eq!(b.state(), BackendState::Draining);
        assert!(b.enqueue(pending(9, ms(10)), ms(10)).is_err());
        let done = b.advance(ms(1000));
        assert_eq!(done.len(), 5);
        assert_eq!(b.state(), BackendState::Stopped);
        assert_eq!(b.stopped_at(), Some(ms(250)));
        assert!(b.drain(ms(1000)).is_err());
    }

    #[test]
    fn drain_idle_stops_immediately() {
        let mut b = ready(50, 10);
        b.drain(ms(5)).unwrap();
        assert_eq!(b.state(), BackendState::Stopped);
        let mut s = BackendInstance::spawn(BackendId(1), Duration::from_secs(10), SimTime::ZERO, 10, models(50), 1);
        s.drain(ms(5)).unwrap();
        assert_eq!(s.state(), BackendState::Stopped);
    }

    #[test]
    fn stopped_rejects_enqueue() {
        let mut b = ready(50, 10);
        b.drain(ms(0)).unwrap();
        assert!(matches!(b.enqueue(pending(1, ms(1)), ms(1)), Err(CoreError::InvalidState { .. })));
    }

    #[test]
    fn fleet_rejects_duplicate_ids_and_drains_highest() {
        let mut f = Fleet::new(models(50), Duration::ZERO, 10, 0);
        let a = f.spawn(SimTime::ZERO);
        f.spawn(SimTime::ZERO);
        f.spawn(SimTime::ZERO);
        assert!(f.spawn_with(a, Duration::ZERO, SimTime::ZERO).is_err());
        let drained = f.drain_highest(2, SimTime::ZERO);
        assert_eq!(drained, vec![BackendId(2), BackendId(1)]);
        assert_eq!(f.active_replicas(), 1);
        assert_eq!(f.snapshot(), vec![(BackendId(0), BackendState::Ready)]);
    }

    #[test]
    fn backend_id_display_sorts_like_number() {
        let mut ids: Vec<String> = [3u32, 12, 100, 7].iter().map(|&i| BackendId(i).to_string()).collect();
        ids.sort();
        assert_eq!(ids, vec!["gpu-0003", "gpu-0007", "gpu-0012", "gpu-0100"]);
    }
}
