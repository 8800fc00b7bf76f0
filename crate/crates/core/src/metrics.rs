//! Counters, gauges and sliding-window series shared by all components.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use crate::backend::BackendId;
use crate::error::Result;
use crate::request::{Outcome, RequestRecord};
use crate::time::{nanos, SimTime};

/// Time-ordered samples kept for a bounded retention period.
///
/// Samples older than `retention` relative to the newest one are evicted, and
/// the buffer never holds more than `capacity` samples (oldest go first).
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    retention: Duration,
    capacity: usize,
    samples: VecDeque<(SimTime, f64)>,
}

impl SlidingWindow {
    pub fn new(retention: Duration, capacity: usize) -> Self {
        SlidingWindow { retention, capacity: capacity.max(1), samples: VecDeque::new() }
    }

    /// Capacity sized for `retention / min_sample_interval` samples.
    pub fn with_min_interval(retention: Duration, min_sample_interval: Duration) -> Self {
        let cap = nanos(retention) / nanos(min_sample_interval).max(1);
        Self::new(retention, usize::try_from(cap).unwrap_or(usize::MAX))
    }

    pub fn push(&mut self, t: SimTime, value: f64) {
        // out-of-order arrivals are rare (network reordering), keep sorted
        let pos = self.samples.partition_point(|&(ts, _)| ts <= t);
        self.samples.insert(pos, (t, value));
        let newest = self.samples.back().map(|s| s.0).unwrap_or(t);
        let horizon = newest.saturating_sub(self.retention);
        while self.samples.front().is_some_and(|&(ts, _)| ts < horizon) {
            self.samples.pop_front();
        }
        while self.samples.len() > self.capacity {
            self.samples.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SimTime, f64)> + '_ {
        self.samples.iter().copied()
    }

    fn window_range(&self, now: SimTime, window: Duration) -> std::ops::Range<usize> {
        let hi = self.samples.partition_point(|&(ts, _)| ts <= now);
        let lo = match now.as_nanos().checked_sub(nanos(window)) {
            Some(lower) => self.samples.partition_point(|&(ts, _)| ts.as_nanos() <= lower),
            None => 0,
        };
        lo..hi.max(lo)
    }

    /// Sum and count of samples with timestamp in `(now - window, now]`.
    pub fn window_sum_count(&self, now: SimTime, window: Duration) -> (f64, usize) {
        let range = self.window_range(now, window);
        let n = range.len();
        let sum = self.samples.range(range).map(|s| s.1).sum();
        (sum, n)
    }

    /// Mean over `(now - window, now]`, or `None` when the window is empty.
    pub fn window_average(&self, now: SimTime, window: Duration) -> Option<f64> {
        if window.is_zero() {
            return None;
        }
        match self.window_sum_count(now, window) {
            (_, 0) => None,
            (sum, n) => Some(sum / n as f64),
        }
    }

    /// Values in `(now - window, now]`, in time order.
    pub fn window_values(&self, now: SimTime, window: Duration) -> Vec<f64> {
        let range = self.window_range(now, window);
        self.samples.range(range).map(|s| s.1).collect()
    }
}

/// Upper bounds (seconds) of the end-to-end latency histogram.
pub const LATENCY_BUCKETS: [f64; 12] = [0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Histogram {
    /// Non-cumulative counts per bucket in `LATENCY_BUCKETS`, plus +Inf last.
    pub counts: Vec<u64>,
    pub sum: f64,
    pub count: u64,
}

impl Histogram {
    fn new() -> Self {
        Histogram { counts: vec![0; LATENCY_BUCKETS.len() + 1], sum: 0.0, count: 0 }
    }

    fn observe(&mut self, v: f64) {
        let idx = LATENCY_BUCKETS.iter().position(|&b| v <= b).unwrap_or(LATENCY_BUCKETS.len());
        self.counts[idx] += 1;
        self.sum += v;
        self.count += 1;
    }

    /// Cumulative `(upper bound, count)` pairs ending with `+Inf`.
    pub fn cumulative(&self) -> Vec<(f64, u64)> {
        let mut acc = 0;
        LATENCY_BUCKETS
            .iter()
            .copied()
            .chain(std::iter::once(f64::INFINITY))
            .zip(&self.counts)
            .map(|(b, c)| {
                acc += c;
                (b, acc)
            })
            .collect()
    }
}

/// Label set of a gauge, sorted by key.
pub type Labels = Vec<(String, String)>;

/// Point-in-time copy of everything exposable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSnapshot {
    pub requests_total: BTreeMap<(String, Outcome), u64>,
    pub latency_by_source_seconds: BTreeMap<&'static str, f64>,
    pub gauges: BTreeMap<String, BTreeMap<Labels, f64>>,
    pub end_to_end: Histogram,
}

#[derive(Debug)]
struct Inner {
    requests_total: BTreeMap<(String, Outcome), u64>,
    latency_by_source: BTreeMap<&'static str, f64>,
    gauges: BTreeMap<String, BTreeMap<Labels, f64>>,
    queue_latency: BTreeMap<BackendId, SlidingWindow>,
    end_to_end: SlidingWindow,
    completions: BTreeMap<String, SlidingWindow>,
    e2e_hist: Histogram,
}

/// Thread-safe registry; every method takes `&self`.
#[derive(Debug)]
pub struct MetricsRegistry {
    retention: Duration,
    min_sample_interval: Duration,
    inner: Mutex<Inner>,
}

impl Default for MetricsRegistry {
    fn default() -> Self {
        Self::new(Duration::from_secs(120), Duration::from_micros(500))
    }
}

impl MetricsRegistry {
    pub fn new(retention: Duration, min_sample_interval: Duration) -> Self {
        MetricsRegistry {
            retention,
            min_sample_interval,
            inner: Mutex::new(Inner {
                requests_total: BTreeMap::new(),
                latency_by_source: BTreeMap::new(),
                gauges: BTreeMap::new(),
                queue_latency: BTreeMap::new(),
                end_to_end: SlidingWindow::with_min_interval(retention, min_sample_interval),
                completions: BTreeMap::new(),
                e2e_hist: Histogram::new(),
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn window(&self) -> SlidingWindow {
        SlidingWindow::with_min_interval(self.retention, self.min_sample_interval)
    }

    /// Accounts one finalized request. Rejections only bump the counter.
    pub fn record_request(&self, record: &RequestRecord) -> Result<()> {
        record.validate()?;
        let mut inner = self.lock();
        *inner.requests_total.entry((record.model.clone(), record.outcome)).or_default() += 1;
        if record.outcome != Outcome::Ok {
            return Ok(());
        }
        // validate() guarantees these are present for ok records
        let (Some(b), Some(recv)) = (record.backend, record.t_client_recv) else {
            return Ok(());
        };
        let queue = record.queue_time().unwrap_or_default();
        let compute = record.compute_time().unwrap_or_default();
        let network = record.network_time().unwrap_or_default();
        let total = record.total_time().unwrap_or_default();

        let fresh = self.window();
        inner.queue_latency.entry(b.backend_id).or_insert_with(|| fresh.clone()).push(b.t_compute_end, nanos(queue) as f64);
        inner.end_to_end.push(recv, nanos(total) as f64);
        inner.completions.entry(record.model.clone()).or_insert(fresh).push(b.t_compute_end, record.batch_size as f64);
        inner.e2e_hist.observe(total.as_secs_f64());
        for (source, d) in [("network", network), ("queue", queue), ("compute", compute)] {
            *inner.latency_by_source.entry(source).or_default() += d.as_secs_f64();
        }
        Ok(())
    }

    pub fn requests_total(&self, model: &str, outcome: Outcome) -> u64 {
        self.lock().requests_total.get(&(model.to_string(), outcome)).copied().unwrap_or(0)
    }

    pub fn outcome_total(&self, outcome: Outcome) -> u64 {
        self.lock().requests_total.iter().filter(|((_, o), _)| *o == outcome).map(|(_, v)| v).sum()
    }

    /// Completed inferences per second for `model` over `(now - window, now]`.
    pub fn inference_rate(&self, model: &str, now: SimTime, window: Duration) -> f64 {
        if window.is_zero() {
            return 0.0;
        }
        let n = self.lock().completions.get(model).map_or(0, |w| w.window_sum_count(now, window).1);
        n as f64 / window.as_secs_f64()
    }

    /// Sum (ns) and count of a backend's queue-latency samples in the window.
    pub fn queue_latency_sum_count(&self, backend: BackendId, now: SimTime, window: Duration) -> (f64, usize) {
        self.lock().queue_latency.get(&backend).map_or((0.0, 0), |w| w.window_sum_count(now, window))
    }

    pub fn queue_latency_average(&self, backend: BackendId, now: SimTime, window: Duration) -> Option<Duration> {
        self.lock()
            .queue_latency
            .get(&backend)
            .and_then(|w| w.window_average(now, window))
            .map(|ns| Duration::from_nanos(ns.round() as u64))
    }

    pub fn queue_latency_series_len(&self, backend: BackendId) -> usize {
        self.lock().queue_latency.get(&backend).map_or(0, SlidingWindow::len)
    }

    /// Raw queue-latency samples of one backend (ns), oldest first.
    pub fn queue_latency_samples(&self, backend: BackendId) -> Vec<(SimTime, f64)> {
        self.lock().queue_latency.get(&backend).map(|w| w.iter().collect()).unwrap_or_default()
    }

    pub fn end_to_end_len(&self) -> usize {
        self.lock().end_to_end.len()
    }

    pub fn end_to_end_window(&self, now: SimTime, window: Duration) -> Vec<f64> {
        self.lock().end_to_end.window_values(now, window)
    }

    pub fn set_gauge(&self, name: &str, labels: &[(&str, &str)], value: f64) {
        let mut labels: Labels = labels.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        labels.sort();
        self.lock().gauges.entry(name.to_string()).or_default().insert(labels, value);
    }

    /// Drops every series of a gauge family (e.g. before re-publishing
    /// per-backend values for the current fleet).
    pub fn clear_gauge(&self, name: &str) {
        if let Some(family) = self.lock().gauges.get_mut(name) {
            family.clear();
        }
    }

    pub fn gauge(&self, name: &str, labels: &[(&str, &str)]) -> Option<f64> {
        let mut labels: Labels = labels.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        labels.sort();
        self.lock().gauges.get(name).and_then(|f| f.get(&labels)).copied()
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let inner = self.lock();
        MetricsSnapshot {
            requests_total: inner.requests_total.clone(),
            latency_by_source_seconds: inner.latency_by_source.clone(),
            gauges: inner.gauges.clone(),
            end_to_end: inner.e2e_hist.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::{BackendTiming, InferenceRequest, RequestId};
    use proptest::prelude::*;

    fn s(secs: u64) -> SimTime {
        SimTime::from_secs(secs)
    }

    #[test]
    fn window_average_of_two_samples() {
        let mut w = SlidingWindow::new(Duration::from_secs(60), 100);
        w.push(s(1), 100.0);
        w.push(s(2), 300.0);
        assert_eq!(w.window_average(s(2), Duration::from_secs(5)), Some(200.0));
    }

    #[test]
    fn empty_window_is_absent() {
        let mut w = SlidingWindow::new(Duration::from_secs(60), 100);
        assert_eq!(w.window_average(s(10), Duration::from_secs(5)), None);
        w.push(s(1), 1.0);
        assert_eq!(w.window_average(s(10), Duration::from_secs(5)), None);
    }

    #[test]
    fn window_excludes_lower_edge() {
        let mut w = SlidingWindow::new(Duration::from_secs(60), 100);
        w.push(s(5), 1.0);
        w.push(s(10), 3.0);
        // (5, 10] excludes t=5
        assert_eq!(w.window_average(s(10), Duration::from_secs(5)), Some(3.0));
    }

    #[test]
    fn ramp_matches_rescan() {
        let mut w = SlidingWindow::new(Duration::from_secs(10_000), 10_000);
        for i in 0..1000u64 {
            w.push(SimTime::from_millis(i * 10), i as f64);
        }
        let now = SimTime::from_millis(9990);
        let window = Duration::from_millis(1000);
        let brute: Vec<f64> = (0..1000u64).filter(|i| i * 10 > 8990 && i * 10 <= 9990).map(|i| i as f64).collect();
        assert_eq!(brute.len(), 100);
        let expected = brute.iter().sum::<f64>() / 100.0;
        assert_eq!(w.window_average(now, window), Some(expected));
        assert_eq!(expected, 949.5);
    }

    #[test]
    fn capacity_and_retention_bound_memory() {
        let mut w = SlidingWindow::new(Duration::from_secs(5), 3);
        for i in 0..10 {
            w.push(s(i), i as f64);
        }
        assert_eq!(w.len(), 3);
        let mut w = SlidingWindow::new(Duration::from_secs(5), 100);
        for i in 0..10 {
            w.push(s(i), i as f64);
        }
        assert_eq!(w.iter().next().unwrap().0, s(4));
    }

    proptest! {
        #[test]
        fn window_average_equals_naive_rescan(
            mut times in proptest::collection::vec(0u64..10_000, 0..200),
            values in proptest::collection::vec(-1e6f64..1e6, 200),
            now in 0u64..12_000,
            window in 1u64..12_000,
        ) {
            times.sort_unstable();
            let mut w = SlidingWindow::new(Duration::from_secs(1_000_000), 1_000_000);
            let raw: Vec<(u64, f64)> = times.iter().zip(&values).map(|(&t, &v)| (t, v)).collect();
            for &(t, v) in &raw {
                w.push(SimTime::from_millis(t), v);
            }
            let inside: Vec<f64> = raw
                .iter()
                .filter(|(t, _)| (*t as i64) > now as i64 - window as i64 && *t <= now)
                .map(|p| p.1)
                .collect();
            let got = w.window_average(SimTime::from_millis(now), Duration::from_millis(window));
            if inside.is_empty() {
                prop_assert_eq!(got, None);
            } else {
                let expected = inside.iter().sum::<f64>() / inside.len() as f64;
                let got = got.unwrap();
                prop_assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            }
        }
    }

    fn ok_record(id: u64, backend: u32, enqueue_ms: u64, start_ms: u64, end_ms: u64) -> RequestRecord {
        let req = InferenceRequest::new(RequestId(id), "m", 1, vec![]).unwrap();
        let mut r = RequestRecord::new(&req, SimTime::from_millis(enqueue_ms), SimTime::from_millis(enqueue_ms));
        r.backend = Some(BackendTiming {
            backend_id: BackendId(backend),
            t_enqueue: SimTime::from_millis(enqueue_ms),
            t_compute_start: SimTime::from_millis(start_ms),
            t_compute_end: SimTime::from_millis(end_ms),
        });
        r.t_client_recv = Some(SimTime::from_millis(end_ms));
        r
    }

    #[test]
    fn ok_record_feeds_series() {
        let m = MetricsRegistry::default();
        m.record_request(&ok_record(1, 0, 0, 70, 120)).unwrap();
        assert_eq!(m.requests_total("m", Outcome::Ok), 1);
        assert_eq!(m.queue_latency_samples(BackendId(0)), vec![(SimTime::from_millis(120), 70e6)]);
        assert_eq!(m.end_to_end_len(), 1);
    }

    #[test]
    fn rejected_record_only_counts() {
        let m = MetricsRegistry::default();
        let req = InferenceRequest::new(RequestId(1), "m", 1, vec![]).unwrap();
        let mut r = RequestRecord::new(&req, SimTime::ZERO, SimTime::ZERO);
        r.outcome = Outcome::RejectedRate;
        r.t_client_recv = Some(SimTime::ZERO);
        m.record_request(&r).unwrap();
        assert_eq!(m.requests_total("m", Outcome::RejectedRate), 1);
        assert_eq!(m.requests_total("m", Outcome::Ok), 0);
        assert_eq!(m.end_to_end_len(), 0);
        assert_eq!(m.queue_latency_series_len(BackendId(0)), 0);
    }

    #[test]
    fn invalid_record_is_refused() {
        let m = MetricsRegistry::default();
        let r = ok_record(1, 0, 100, 50, 120);
        assert!(m.record_request(&r).is_err());
        assert_eq!(m.requests_total("m", Outcome::Ok), 0);
    }

    #[test]
    fn counts_match_replay() {
        let m = MetricsRegistry::default();
        for i in 0..500 {
            m.record_request(&ok_record(i, (i % 3) as u32, i * 10, i * 10 + 1, i * 10 + 5)).unwrap();
        }
        assert_eq!(m.requests_total("m", Outcome::Ok), 500);
        assert_eq!(m.end_to_end_len(), 500);
        let per_backend: usize = (0..3).map(|b| m.queue_latency_series_len(BackendId(b))).sum();
        assert_eq!(per_backend, 500);
    }

    #[test]
    fn inference_rate_is_counter_delta_over_window() {
        let m = MetricsRegistry::default();
        // 10 completions per second for 20 s
        for i in 0..200u64 {
            m.record_request(&ok_record(i, 0, i * 100, i * 100, i * 100 + 1)).unwrap();
        }
        let rate = m.inference_rate("m", SimTime::from_secs(20), Duration::from_secs(10));
        assert!((rate - 10.0).abs() <= 0.1, "{rate}");
    }

    #[test]
    fn gauges_and_histogram() {
        let m = MetricsRegistry::default();
        m.set_gauge("ready_replicas", &[], 5.0);
        m.set_gauge("gpu_utilization", &[("backend", "gpu-0001")], 0.5);
        assert_eq!(m.gauge("ready_replicas", &[]), Some(5.0));
        m.clear_gauge("gpu_utilization");
        assert_eq!(m.gauge("gpu_utilization", &[("backend", "gpu-0001")]), None);
        m.record_request(&ok_record(1, 0, 0, 0, 60)).unwrap();
        let snap = m.snapshot();
        let cum = snap.end_to_end.cumulative();
        assert_eq!(cum.last().unwrap().1, 1);
        assert_eq!(cum.iter().find(|(b, _)| *b == 0.1).unwrap().1, 1);
        assert_eq!(cum.iter().find(|(b, _)| *b == 0.05).unwrap().1, 0);
    }
}
