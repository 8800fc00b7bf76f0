//! Real-time execution: the gateway listens on TCP for wire-protocol frames,
//! an engine task owns the fleet, gateway and autoscaler, and closed-loop
//! clients follow the phase schedule with time compressed by `time_scale`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use gpufleet_core::autoscaler::collect_metric;
use gpufleet_core::loadgen::ZERO_THINK_RETRY;
use gpufleet_core::request::BackendTiming;
use gpufleet_core::time::nanos;
use gpufleet_core::{
    take_sample, Autoscaler, BackendId, Decision, Fleet, FleetPolicy, Gateway, InferenceRequest, MetricsRegistry,
    ModelRegistry, Outcome, RequestId, RequestRecord, RouteResult, Sample, SimConfig, SimOutput, SimTime, TimeSource,
};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::config::ExperimentConfig;
use crate::experiment::ExperimentError;
use crate::wire::{self, DecodeError, Message, RequestFrame, ResponseFrame, Status};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] wire::EncodeError),
}

/// Reads one frame, buffering any bytes past it in `buf`. `Ok(None)` on a
/// clean end of stream.
pub async fn read_message(stream: &mut TcpStream, buf: &mut Vec<u8>) -> Result<Option<Message>, StreamError> {
    loop {
        if let Some((msg, used)) = wire::decode_prefix(buf)? {
            buf.drain(..used);
            return Ok(Some(msg));
        }
        let mut chunk = [0u8; 4096];
        let n = stream.read(&mut chunk).await?;
        if n == 0 {
            if buf.is_empty() {
                return Ok(None);
            }
            return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

pub async fn write_message(stream: &mut TcpStream, msg: &Message) -> Result<(), StreamError> {
    stream.write_all(&wire::encode(msg)?).await?;
    Ok(())
}

enum Command {
    Route { request: InferenceRequest, reply: oneshot::Sender<RequestRecord> },
    Shutdown,
}

struct EngineOutput {
    fleet: Fleet,
    samples: Vec<Sample>,
    decisions: Vec<Decision>,
    peak_in_flight: usize,
}

struct Engine {
    clock: TimeSource,
    fleet: Fleet,
    gateway: Gateway,
    autoscaler: Option<Autoscaler>,
    metrics: Arc<MetricsRegistry>,
    waiters: HashMap<RequestId, oneshot::Sender<RequestRecord>>,
    samples: Vec<Sample>,
    decisions: Vec<Decision>,
    clients: watch::Receiver<u32>,
    config: SimConfig,
    schedule_end: SimTime,
    next_sample: SimTime,
}

impl Engine {
    fn step(&mut self) -> Result<(), ExperimentError> {
        let now = self.clock.now();
        for record in self.fleet.advance(now) {
            self.gateway.release();
            if let Some(tx) = self.waiters.remove(&record.request_id) {
                let _ = tx.send(record);
            }
        }
        if let Some(a) = self.autoscaler.as_mut() {
            if now >= a.next_poll() && a.next_poll() <= self.schedule_end {
                self.decisions.push(a.reconcile(&mut self.fleet, &self.metrics, now)?);
            }
        }
        if now >= self.next_sample {
            self.sample(now);
            self.next_sample = now + self.config.sample_interval;
        }
        Ok(())
    }

    fn sample(&mut self, now: SimTime) {
        let last = self.samples.last().map_or(SimTime::ZERO, |s| s.t);
        if now <= last {
            return;
        }
        let clients = *self.clients.borrow();
        let window = self.config.fleet.metric_window();
        self.samples.push(take_sample(&self.fleet, &self.metrics, clients, now, now - last, window));
    }

    fn route(&mut self, request: InferenceRequest, reply: oneshot::Sender<RequestRecord>) {
        let now = self.clock.now();
        let external = self
            .config
            .gateway
            .external_metric_limit
            .as_ref()
            .and_then(|_| collect_metric(&self.fleet, &self.metrics, now, self.config.fleet.metric_window()))
            .map(|d| d.as_secs_f64());
        match self.gateway.route(&request, now, now, &mut self.fleet, external) {
            RouteResult::Accepted { .. } => {
                self.waiters.insert(request.request_id, reply);
            }
            RouteResult::Rejected(record) => {
                let _ = reply.send(record);
            }
        }
    }

    fn next_wake(&self) -> Option<SimTime> {
        let poll = self.autoscaler.as_ref().map(Autoscaler::next_poll).filter(|&t| t <= self.schedule_end);
        [self.fleet.next_event_time(), poll, Some(self.next_sample)].into_iter().flatten().min()
    }

    async fn run(mut self, mut commands: mpsc::Receiver<Command>) -> Result<EngineOutput, ExperimentError> {
        let mut stopping = false;
        loop {
            self.step()?;
            if stopping && self.fleet.outstanding() == 0 {
                break;
            }
            let wake = self.next_wake().map(|t| self.clock.real_delay_until(t));
            tokio::select! {
                cmd = commands.recv(), if !stopping => match cmd {
                    Some(Command::Route { request, reply }) => {
                        self.fleet.advance(self.clock.now()).into_iter().for_each(|r| {
                            self.gateway.release();
                            if let Some(tx) = self.waiters.remove(&r.request_id) {
                                let _ = tx.send(r);
                            }
                        });
                        self.route(request, reply);
                    }
                    Some(Command::Shutdown) | None => stopping = true,
                },
                _ = tokio::time::sleep(wake.unwrap_or(Duration::from_millis(50))) => {}
            }
        }
        let now = self.clock.now();
        self.sample(now);
        Ok(EngineOutput {
            fleet: self.fleet,
            samples: self.samples,
            decisions: self.decisions,
            peak_in_flight: self.gateway.peak_in_flight(),
        })
    }
}

/// A running gateway: engine task plus TCP listener.
pub struct Server {
    pub addr: SocketAddr,
    pub metrics: Arc<MetricsRegistry>,
    pub clock: TimeSource,
    clients: watch::Sender<u32>,
    commands: mpsc::Sender<Command>,
    engine: JoinHandle<Result<EngineOutput, ExperimentError>>,
    listener: JoinHandle<()>,
    schedule_end: SimTime,
}

/// Starts the engine and the wire-protocol listener for `cfg`.
pub async fn start_server(cfg: &ExperimentConfig) -> Result<Server, ExperimentError> {
    let sim = cfg.sim_config();
    sim.validate()?;
    let clock = TimeSource::wall_clock(cfg.wallclock.time_scale)?;
    let models = Arc::new(ModelRegistry::new(sim.models.iter().cloned())?);
    let mut fleet = Fleet::new(models, sim.startup_delay, sim.queue_capacity, sim.seed);
    for i in 0..sim.fleet.initial_replicas() {
        fleet.spawn_with(BackendId(i), Duration::ZERO, SimTime::ZERO)?;
    }
    let autoscaler = match &sim.fleet {
        FleetPolicy::Autoscaled(a) => Some(Autoscaler::new(a.clone())?),
        FleetPolicy::Static { .. } => None,
    };
    let window = sim.fleet.metric_window().max(sim.sample_interval);
    let metrics = Arc::new(MetricsRegistry::new(window * 2, Duration::from_micros(100)));
    let (clients_tx, clients_rx) = watch::channel(0u32);
    let schedule_end = SimTime::ZERO + sim.schedule.total_duration();
    let engine = Engine {
        clock: clock.clone(),
        fleet,
        gateway: Gateway::new(sim.gateway.clone())?,
        autoscaler,
        metrics: metrics.clone(),
        waiters: HashMap::new(),
        samples: Vec::new(),
        decisions: Vec::new(),
        clients: clients_rx,
        next_sample: SimTime::ZERO + sim.sample_interval,
        schedule_end,
        config: sim,
    };
    let (commands, rx) = mpsc::channel(1024);
    let engine = tokio::spawn(engine.run(rx));

    let listener = TcpListener::bind(cfg.gateway.listen).await?;
    let addr = listener.local_addr()?;
    let ids = Arc::new(AtomicU64::new(0));
    let tx = commands.clone();
    let listener = tokio::spawn(async move {
        while let Ok((stream, _)) = listener.accept().await {
            let _ = stream.set_nodelay(true);
            tokio::spawn(serve_connection(stream, tx.clone(), ids.clone()));
        }
    });
    Ok(Server { addr, metrics, clock, clients: clients_tx, commands, engine, listener, schedule_end })
}

async fn serve_connection(mut stream: TcpStream, commands: mpsc::Sender<Command>, ids: Arc<AtomicU64>) {
    let mut buf = Vec::new();
    while let Ok(Some(msg)) = read_message(&mut stream, &mut buf).await {
        let Message::Request(frame) = msg else {
            tracing::debug!("client sent a response frame; closing");
            return;
        };
        let id = RequestId(ids.fetch_add(1, Ordering::Relaxed));
        let Ok(mut request) = InferenceRequest::new(id, frame.model, frame.batch_size, frame.token) else {
            tracing::debug!("invalid request frame; closing");
            return;
        };
        request.payload_size = frame.payload.len() as u32;
        let (reply, done) = oneshot::channel();
        if commands.send(Command::Route { request, reply }).await.is_err() {
            return;
        }
        let Ok(record) = done.await else { return };
        let response = match record.backend {
            Some(b) if record.outcome == Outcome::Ok => ResponseFrame {
                status: Status::Ok,
                queue_ns: nanos(b.t_compute_start - b.t_enqueue),
                compute_ns: nanos(b.t_compute_end - b.t_compute_start),
                payload: b.backend_id.0.to_be_bytes().to_vec(),
            },
            _ => ResponseFrame { status: record.outcome.into(), queue_ns: 0, compute_ns: 0, payload: Vec::new() },
        };
        if write_message(&mut stream, &Message::Response(response)).await.is_err() {
            return;
        }
    }
}

impl Server {
    /// Publishes the number of active clients shown in samples.
    pub fn set_clients(&self, n: u32) {
        let _ = self.clients.send(n);
    }

    /// Stops the server; the output carries no client records.
    pub async fn shutdown(self) -> Result<SimOutput, ExperimentError> {
        self.finish(Vec::new(), 0).await
    }

    /// Stops accepting connections, waits for outstanding work and returns
    /// the final fleet state. Records are supplied by the caller.
    async fn finish(self, records: Vec<RequestRecord>, sent: u64) -> Result<SimOutput, ExperimentError> {
        self.listener.abort();
        let _ = self.commands.send(Command::Shutdown).await;
        let out = self.engine.await.map_err(|e| ExperimentError::Runtime(e.to_string()))??;
        let received = records.len() as u64;
        Ok(SimOutput {
            records,
            horizon: out.samples.last().map_or(SimTime::ZERO, |s| s.t),
            samples: out.samples,
            decisions: out.decisions,
            fleet: out.fleet,
            metrics: self.metrics,
            schedule_end: self.schedule_end,
            event_log: Vec::new(),
            peak_in_flight: out.peak_in_flight,
            clients_sent: sent,
            clients_received: received,
        })
    }
}

/// Rebuilds the client's view of a response. Network time is whatever is
/// left of the round trip after the backend's queue and compute time, split
/// evenly between the two directions.
pub fn client_record(
    id: RequestId,
    client: u32,
    frame: &RequestFrame,
    t_send: SimTime,
    t_recv: SimTime,
    response: &ResponseFrame,
) -> RequestRecord {
    let mut record = RequestRecord {
        request_id: id,
        model: frame.model.clone(),
        batch_size: frame.batch_size,
        client_id: Some(client),
        t_client_send: t_send,
        t_gateway_in: t_send,
        backend: None,
        t_client_recv: Some(t_recv),
        outcome: response.status.into(),
    };
    if response.status == Status::Ok {
        let total = nanos(t_recv - t_send);
        let queue = response.queue_ns.min(total);
        let compute = response.compute_ns.min(total - queue);
        let network = total - queue - compute;
        let t_enqueue = t_send + Duration::from_nanos(network / 2);
        let backend_id = response.payload.get(..4).map_or(u32::MAX, |b| u32::from_be_bytes(b.try_into().unwrap()));
        record.t_gateway_in = t_enqueue;
        record.backend = Some(BackendTiming {
            backend_id: BackendId(backend_id),
            t_enqueue,
            t_compute_start: t_enqueue + Duration::from_nanos(queue),
            t_compute_end: t_enqueue + Duration::from_nanos(queue + compute),
        });
    }
    record
}

struct ClientCtx {
    addr: SocketAddr,
    clock: TimeSource,
    metrics: Arc<MetricsRegistry>,
    target: watch::Receiver<(u32, bool)>,
    spec: gpufleet_core::ClientSpec,
    network_delay: Duration,
    scale: f64,
    ids: Arc<AtomicU64>,
}

fn real(d: Duration, scale: f64) -> Duration {
    Duration::from_secs_f64(d.as_secs_f64() / scale)
}

/// One closed-loop client: active while the target count exceeds its index.
async fn client_loop(index: u32, mut ctx: ClientCtx) -> Result<(Vec<RequestRecord>, u64), StreamError> {
    let mut records = Vec::new();
    let mut sent = 0u64;
    let mut stream = TcpStream::connect(ctx.addr).await?;
    stream.set_nodelay(true)?;
    let mut buf = Vec::new();
    loop {
        let (target, done) = *ctx.target.borrow_and_update();
        if target <= index {
            if done || ctx.target.changed().await.is_err() {
                break;
            }
            continue;
        }
        let frame = RequestFrame {
            token: ctx.spec.token.clone(),
            model: ctx.spec.model.clone(),
            batch_size: ctx.spec.batch_size,
            payload: vec![0; ctx.spec.payload_size as usize],
        };
        let id = RequestId(ctx.ids.fetch_add(1, Ordering::Relaxed));
        let t_send = ctx.clock.now();
        sent += 1;
        tokio::time::sleep(real(ctx.network_delay, ctx.scale)).await;
        write_message(&mut stream, &Message::Request(frame.clone())).await?;
        let Some(Message::Response(response)) = read_message(&mut stream, &mut buf).await? else {
            return Err(std::io::Error::other("gateway closed the connection").into());
        };
        tokio::time::sleep(real(ctx.network_delay, ctx.scale)).await;
        let t_recv = ctx.clock.now();
        let record = client_record(id, index, &frame, t_send, t_recv, &response);
        if let Err(e) = ctx.metrics.record_request(&record) {
            tracing::warn!("dropping inconsistent record: {e}");
        }
        let pause = match (record.outcome, ctx.spec.think_time.is_zero()) {
            (Outcome::Ok, _) | (_, false) => ctx.spec.think_time,
            (_, true) => ZERO_THINK_RETRY,
        };
        records.push(record);
        if !pause.is_zero() {
            // a stop request during think time takes effect immediately
            tokio::select! {
                _ = tokio::time::sleep(real(pause, ctx.scale)) => {}
                _ = ctx.target.changed() => {}
            }
        }
    }
    Ok((records, sent))
}

/// Runs the experiment in real time and returns the same output shape as a
/// virtual-time run.
pub async fn run(cfg: &ExperimentConfig) -> Result<SimOutput, ExperimentError> {
    let server = start_server(cfg).await?;
    let metrics_task = match cfg.wallclock.metrics_listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).await?;
            tracing::info!("serving /metrics on {}", listener.local_addr()?);
            let (stop, stopped) = oneshot::channel::<()>();
            let registry = server.metrics.clone();
            let task = tokio::spawn(crate::exposition::serve_metrics(registry, listener, async {
                let _ = stopped.await;
            }));
            Some((stop, task))
        }
        None => None,
    };

    let schedule = cfg.phase_schedule();
    let (target_tx, target_rx) = watch::channel((0u32, false));
    let ids = Arc::new(AtomicU64::new(0));
    let mut clients = Vec::new();
    for index in 0..schedule.max_clients() {
        let ctx = ClientCtx {
            addr: server.addr,
            clock: server.clock.clone(),
            metrics: server.metrics.clone(),
            target: target_rx.clone(),
            spec: schedule.client.clone(),
            network_delay: cfg.network.delay,
            scale: cfg.wallclock.time_scale,
            ids: ids.clone(),
        };
        clients.push(tokio::spawn(client_loop(index, ctx)));
    }
    let mut clock = server.clock.clone();
    let boundaries = schedule.boundaries();
    for (i, &(at, n)) in boundaries.iter().enumerate() {
        tokio::time::sleep(clock.real_delay_until(at)).await;
        let last = i + 1 == boundaries.len();
        server.set_clients(n);
        let _ = target_tx.send((n, last));
    }

    let mut records = Vec::new();
    let mut sent = 0;
    for c in clients {
        let (r, s) = c.await.map_err(|e| ExperimentError::Runtime(e.to_string()))?.map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        records.extend(r);
        sent += s;
    }
    records.sort_by_key(|r| (r.t_client_send, r.request_id));
    let out = server.finish(records, sent).await?;
    if let Some((stop, task)) = metrics_task {
        let _ = stop.send(());
        let _ = task.await;
    }
    Ok(out)
}

/// [`run`] on a fresh multi-threaded runtime.
pub fn run_blocking(cfg: &ExperimentConfig) -> Result<SimOutput, ExperimentError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(run(cfg))
}
