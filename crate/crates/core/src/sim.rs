//! Deterministic virtual-time event loop wiring clients, gateway, fleet and
//! autoscaler together.
//!
//! At any instant the sources are serviced in a fixed order: backend
//! completions and readiness, phase boundaries, client events (responses
//! before sends, then by client id), autoscaler polls, and finally the
//! time-series sampler. Equal config and seed therefore give identical runs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;
use std::time::Duration;

use crate::autoscaler::{collect_metric, Autoscaler, AutoscalerConfig, Decision};
use crate::backend::{BackendId, BackendState, Fleet, DEFAULT_QUEUE_CAPACITY, DEFAULT_STARTUP_DELAY};
use crate::error::{CoreError, Result};
use crate::gateway::{Gateway, GatewayConfig, RouteResult};
use crate::loadgen::{ClientPool, PendingSend, PhaseSchedule};
use crate::metrics::MetricsRegistry;
use crate::model::{ModelProfile, ModelRegistry};
use crate::request::{InferenceRequest, RequestId, RequestRecord};
use crate::time::{nanos, SimTime, TimeSource};

/// Name of the only external metric the gateway can limit on.
pub const AVG_QUEUE_LATENCY_METRIC: &str = "avg_queue_latency_seconds";

#[derive(Debug, Clone, PartialEq)]
pub enum FleetPolicy {
    Static { replicas: u32 },
    Autoscaled(AutoscalerConfig),
}

impl FleetPolicy {
    pub fn initial_replicas(&self) -> u32 {
        match self {
            FleetPolicy::Static { replicas } => *replicas,
            FleetPolicy::Autoscaled(cfg) => cfg.min_replicas,
        }
    }

    pub fn metric_window(&self) -> Duration {
        match self {
            FleetPolicy::Static { .. } => AutoscalerConfig::default().metric_window,
            FleetPolicy::Autoscaled(cfg) => cfg.metric_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub models: Vec<ModelProfile>,
    pub gateway: GatewayConfig,
    pub fleet: FleetPolicy,
    pub startup_delay: Duration,
    pub queue_capacity: usize,
    /// Client to gateway latency, each way. The gateway-backend hop is free.
    pub network_delay: Duration,
    pub schedule: PhaseSchedule,
    pub sample_interval: Duration,
    /// Keep `(time, in-flight)` after every processed event.
    pub record_event_log: bool,
}

impl SimConfig {
    pub fn new(models: Vec<ModelProfile>, fleet: FleetPolicy, schedule: PhaseSchedule) -> Self {
        SimConfig {
            seed: 0,
            models,
            gateway: GatewayConfig::default(),
            fleet,
            startup_delay: DEFAULT_STARTUP_DELAY,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            network_delay: Duration::ZERO,
            schedule,
            sample_interval: Duration::from_secs(1),
            record_event_log: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.gateway.validate()?;
        if let FleetPolicy::Autoscaled(cfg) = &self.fleet {
            cfg.validate()?;
        }
        if self.fleet.initial_replicas() == 0 {
            return Err(CoreError::InvalidArgument("static_replicas must be >= 1".into()));
        }
        if self.sample_interval.is_zero() {
            return Err(CoreError::InvalidArgument("sample_interval must be > 0".into()));
        }
        if self.queue_capacity == 0 {
            return Err(CoreError::InvalidArgument("queue_capacity must be >= 1".into()));
        }
        if !self.models.iter().any(|m| m.name == self.schedule.client.model) {
            return Err(CoreError::UnknownModel(self.schedule.client.model.clone()));
        }
        if let Some(limit) = &self.gateway.external_metric_limit {
            if limit.metric != AVG_QUEUE_LATENCY_METRIC {
                return Err(CoreError::InvalidArgument(format!("unknown external metric `{}`", limit.metric)));
            }
        }
        Ok(())
    }
}

/// One row of the time series, describing the interval `(t - dt, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: SimTime,
    pub client_count: u32,
    pub ready_replicas: u32,
    pub starting_replicas: u32,
    pub draining_replicas: u32,
    /// The autoscaler's view: pooled queue latency over the metric window.
    pub avg_queue_latency: Option<Duration>,
    /// Mean queue latency of requests finishing in this interval.
    pub interval_queue_latency: Option<Duration>,
    pub end_to_end_p50: Option<Duration>,
    pub completed: u64,
    pub busy: Duration,
    pub alive: Duration,
    pub backend_utilization: Vec<(BackendId, f64)>,
}

impl Sample {
    pub fn fleet_utilization(&self) -> Option<f64> {
        (!self.alive.is_zero()).then(|| nanos(self.busy) as f64 / nanos(self.alive) as f64)
    }
}

#[derive(Debug)]
pub struct SimOutput {
    pub records: Vec<RequestRecord>,
    pub samples: Vec<Sample>,
    pub decisions: Vec<Decision>,
    pub fleet: Fleet,
    pub metrics: Arc<MetricsRegistry>,
    pub schedule_end: SimTime,
    /// Last sampled instant; all accounting covers `[0, horizon]`.
    pub horizon: SimTime,
    pub event_log: Vec<(SimTime, usize)>,
    pub peak_in_flight: usize,
    pub clients_sent: u64,
    pub clients_received: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ClientEvent {
    // variant order is the tie-break at equal timestamps
    Response { client: u32, seq: u64 },
    Arrive { client: u32, seq: u64 },
    Send { client: u32, generation: u64 },
}

pub struct Simulation {
    config: SimConfig,
    clock: TimeSource,
    fleet: Fleet,
    gateway: Gateway,
    autoscaler: Option<Autoscaler>,
    metrics: Arc<MetricsRegistry>,
    clients: ClientPool,
    events: BinaryHeap<Reverse<(SimTime, ClientEvent)>>,
    responses: BTreeMap<u64, RequestRecord>,
    arrivals: BTreeMap<u64, (InferenceRequest, SimTime)>,
    owners: BTreeMap<RequestId, u32>,
    seq: u64,
    next_request: u64,
    records: Vec<RequestRecord>,
    samples: Vec<Sample>,
    decisions: Vec<Decision>,
    event_log: Vec<(SimTime, usize)>,
    last_activity: SimTime,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let models = Arc::new(ModelRegistry::new(config.models.iter().cloned())?);
        let mut fleet = Fleet::new(models, config.startup_delay, config.queue_capacity, config.seed);
        for i in 0..config.fleet.initial_replicas() {
            fleet.spawn_with(BackendId(i), Duration::ZERO, SimTime::ZERO)?;
        }
        let autoscaler = match &config.fleet {
            FleetPolicy::Autoscaled(cfg) => Some(Autoscaler::new(cfg.clone())?),
            FleetPolicy::Static { .. } => None,
        };
        let window = config.fleet.metric_window().max(config.sample_interval);
        let metrics = Arc::new(MetricsRegistry::new(window * 2, Duration::from_micros(100)));
        Ok(Simulation {
            clock: TimeSource::virtual_clock(),
            fleet,
            gateway: Gateway::new(config.gateway.clone())?,
            autoscaler,
            metrics,
            clients: ClientPool::new(config.schedule.client.clone()),
            events: BinaryHeap::new(),
            responses: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            owners: BTreeMap::new(),
            seq: 0,
            next_request: 0,
            records: Vec::new(),
            samples: Vec::new(),
            decisions: Vec::new(),
            event_log: Vec::new(),
            last_activity: SimTime::ZERO,
            config,
        })
    }

    pub fn metrics(&self) -> &Arc<MetricsRegistry> {
        &self.metrics
    }

    pub fn run(mut self) -> Result<SimOutput> {
        let boundaries = self.config.schedule.boundaries();
        let schedule_end = boundaries.last().map_or(SimTime::ZERO, |b| b.0);
        let interval = self.config.sample_interval;
        let mut next_boundary = 0usize;
        let mut next_sample = SimTime::ZERO + interval;

        loop {
            let fleet_at = self.fleet.next_event_time();
            let phase_at = boundaries.get(next_boundary).map(|b| b.0);
            let client_at = self.events.peek().map(|e| e.0 .0);
            let poll_at = self.autoscaler.as_ref().map(Autoscaler::next_poll).filter(|&t| t <= schedule_end);
            let busy = !self.events.is_empty() || self.fleet.outstanding() > 0;
            let last_sample = self.samples.last().map_or(SimTime::ZERO, |s| s.t);
            let sample_at =
                Some(next_sample).filter(|&t| t <= schedule_end || busy || last_sample < self.last_activity);

            let Some(now) = [fleet_at, phase_at, client_at, poll_at, sample_at].into_iter().flatten().min() else {
                break;
            };
            self.clock.advance_to(now)?;

            if fleet_at == Some(now) {
                self.on_fleet(now);
            } else if phase_at == Some(now) {
                let target = boundaries[next_boundary].1;
                next_boundary += 1;
                for send in self.clients.set_target(target, now) {
                    self.schedule_send(send);
                }
            } else if client_at == Some(now) {
                let Some(Reverse((_, event))) = self.events.pop() else { unreachable!() };
                self.on_client_event(now, event)?;
            } else if poll_at == Some(now) {
                if let Some(a) = self.autoscaler.as_mut() {
                    let d = a.reconcile(&mut self.fleet, &self.metrics, now)?;
                    self.decisions.push(d);
                }
            } else {
                self.sample(now);
                next_sample = now + interval;
            }
            if self.config.record_event_log {
                self.event_log.push((now, self.gateway.in_flight()));
            }
        }

        let horizon = self.samples.last().map_or(schedule_end, |s| s.t).max(schedule_end);
        let (sent, received) = self.clients.sent_and_received();
        Ok(SimOutput {
            records: self.records,
            samples: self.samples,
            decisions: self.decisions,
            fleet: self.fleet,
            metrics: self.metrics,
            schedule_end,
            horizon,
            event_log: self.event_log,
            peak_in_flight: self.gateway.peak_in_flight(),
            clients_sent: sent,
            clients_received: received,
        })
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn schedule_send(&mut self, send: PendingSend) {
        self.events.push(Reverse((send.at, ClientEvent::Send { client: send.client, generation: send.generation })));
    }

    fn deliver(&mut self, record: RequestRecord, at: SimTime) {
        let seq = self.next_seq();
        let client = record.client_id.unwrap_or(0);
        self.responses.insert(seq, record);
        self.events.push(Reverse((at, ClientEvent::Response { client, seq })));
    }

    fn on_fleet(&mut self, now: SimTime) {
        let done = self.fleet.advance(now);
        if !done.is_empty() {
            self.last_activity = now;
        }
        for mut record in done {
            record.client_id = self.owners.remove(&record.request_id);
            // the response passes the gateway as soon as compute ends
            self.gateway.release();
            let at = record.backend.map_or(now, |b| b.t_compute_end) + self.config.network_delay;
            self.deliver(record, at);
        }
    }

    fn external_metric(&self, now: SimTime) -> Option<f64> {
        self.config.gateway.external_metric_limit.as_ref()?;
        collect_metric(&self.fleet, &self.metrics, now, self.config.fleet.metric_window()).map(|d| d.as_secs_f64())
    }

    fn on_client_event(&mut self, now: SimTime, event: ClientEvent) -> Result<()> {
        self.last_activity = now;
        match event {
            ClientEvent::Send { client, generation } => {
                if !self.clients.begin_send(client, generation) {
                    return Ok(());
                }
                let spec = self.clients.spec();
                let mut request =
                    InferenceRequest::new(RequestId(self.next_request), spec.model.clone(), spec.batch_size, spec.token.clone())?;
                request.payload_size = spec.payload_size;
                self.next_request += 1;
                let seq = self.next_seq();
                self.arrivals.insert(seq, (request, now));
                self.events.push(Reverse((now + self.config.network_delay, ClientEvent::Arrive { client, seq })));
            }
            ClientEvent::Arrive { client, seq } => {
                let (request, t_send) = self.arrivals.remove(&seq).expect("request in transit");
                let external = self.external_metric(now);
                match self.gateway.route(&request, t_send, now, &mut self.fleet, external) {
                    RouteResult::Accepted { .. } => {
                        self.owners.insert(request.request_id, client);
                    }
                    RouteResult::Rejected(mut record) => {
                        record.client_id = Some(client);
                        self.deliver(record, now + self.config.network_delay);
                    }
                }
            }
            ClientEvent::Response { client, seq } => {
                let mut record = self.responses.remove(&seq).expect("response in transit");
                record.t_client_recv = Some(now);
                self.metrics.record_request(&record)?;
                let next = self.clients.on_response(client, record.outcome, now);
                self.records.push(record);
                if let Some(send) = next {
                    self.schedule_send(send);
                }
            }
        }
        Ok(())
    }

    fn sample(&mut self, now: SimTime) {
        let clients = u32::try_from(self.clients.active()).unwrap_or(u32::MAX);
        let window = self.config.fleet.metric_window();
        let sample = take_sample(&self.fleet, &self.metrics, clients, now, self.config.sample_interval, window);
        self.samples.push(sample);
    }
}

/// Builds the time-series row for `(now - interval, now]` and publishes the
/// fleet gauges to `metrics`.
pub fn take_sample(
    fleet: &Fleet,
    metrics: &MetricsRegistry,
    client_count: u32,
    now: SimTime,
    interval: Duration,
    metric_window: Duration,
) -> Sample {
    let t0 = now.saturating_sub(interval);
    let interval = now - t0;
    let (mut busy, mut alive) = (Duration::ZERO, Duration::ZERO);
    let (mut q_sum, mut q_n) = (0.0, 0usize);
    let mut per_backend = Vec::new();
    metrics.clear_gauge("gpu_utilization");
    for b in fleet.iter() {
        let (s, n) = metrics.queue_latency_sum_count(b.id(), now, interval);
        q_sum += s;
        q_n += n;
        let life = b.lifetime_overlap(t0, now);
        if life.is_zero() {
            continue;
        }
        let b_busy = b.busy_time(t0, now);
        busy += b_busy;
        alive += life;
        let u = nanos(b_busy) as f64 / nanos(life) as f64;
        per_backend.push((b.id(), u));
        let label = b.id().to_string();
        metrics.set_gauge("gpu_utilization", &[("backend", label.as_str())], u);
    }
    let mut e2e = metrics.end_to_end_window(now, interval);
    e2e.sort_by(f64::total_cmp);
    let p50 = (!e2e.is_empty()).then(|| {
        let rank = e2e.len().div_ceil(2).max(1);
        Duration::from_nanos(e2e[rank - 1].round() as u64)
    });
    let avg = collect_metric(fleet, metrics, now, metric_window);
    let count = |s| u32::try_from(fleet.count(s)).unwrap_or(u32::MAX);
    let sample = Sample {
        t: now,
        client_count,
        ready_replicas: count(BackendState::Ready),
        starting_replicas: count(BackendState::Starting),
        draining_replicas: count(BackendState::Draining),
        avg_queue_latency: avg,
        interval_queue_latency: (q_n > 0).then(|| Duration::from_nanos((q_sum / q_n as f64).round() as u64)),
        end_to_end_p50: p50,
        completed: e2e.len() as u64,
        busy,
        alive,
        backend_utilization: per_backend,
    };
    metrics.set_gauge("ready_replicas", &[], f64::from(sample.ready_replicas));
    metrics.set_gauge("starting_replicas", &[], f64::from(sample.starting_replicas));
    metrics.set_gauge("active_clients", &[], f64::from(sample.client_count));
    metrics.set_gauge(AVG_QUEUE_LATENCY_METRIC, &[], avg.map_or(0.0, |d| d.as_secs_f64()));
    sample
}
