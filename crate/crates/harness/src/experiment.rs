//! Running experiments and writing their outputs.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::time::Duration;

use gpufleet_core::time::nanos as nanos_of;
use gpufleet_core::{CoreError, Outcome, ScalingAction, SimOutput, SimTime, Simulation};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};

/// Column order of `timeseries.csv`. Changing it is a breaking change.
pub const TIMESERIES_COLUMNS: [&str; 11] = [
    "t_s",
    "client_count",
    "ready_replicas",
    "starting_replicas",
    "draining_replicas",
    "avg_queue_latency_s",
    "interval_queue_latency_s",
    "end_to_end_p50_s",
    "completed",
    "fleet_utilization",
    "backend_utilization",
];

pub const COMPARISON_COLUMNS: [&str; 7] =
    ["label", "mean_latency_s", "p99_latency_s", "mean_gpu_utilization", "replica_seconds", "ok", "rejected"];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("cannot compare runs: {0}")]
    Mismatch(String),
    #[error("wall-clock run failed: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Contents of `summary.json`; see the README for the meaning of each key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub duration_s: f64,
    pub horizon_s: f64,
    pub requests_total: u64,
    pub outcomes: BTreeMap<String, u64>,
    pub throughput_rps: f64,
    pub mean_end_to_end_latency_s: f64,
    pub p50_latency_s: f64,
    pub p95_latency_s: f64,
    pub p99_latency_s: f64,
    pub mean_queue_latency_s: f64,
    pub mean_gpu_utilization: f64,
    pub mean_gpu_utilization_timeseries: f64,
    pub replica_seconds: f64,
    pub peak_replicas: u32,
    pub scale_ups: u32,
    pub scale_downs: u32,
}

pub struct ExperimentResult {
    pub output: SimOutput,
    pub summary: RunSummary,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Time-weighted fleet utilization from raw busy-time accounting: total busy
/// time over total replica lifetime within `[0, horizon]`.
pub fn fleet_utilization_raw(out: &SimOutput) -> (Duration, Duration) {
    let mut busy = Duration::ZERO;
    let mut alive = Duration::ZERO;
    for b in out.fleet.iter() {
        busy += b.busy_time(SimTime::ZERO, out.horizon);
        alive += b.lifetime_overlap(SimTime::ZERO, out.horizon);
    }
    (busy, alive)
}

/// The same quantity integrated from the sampled time series.
pub fn fleet_utilization_timeseries(out: &SimOutput) -> (Duration, Duration) {
    out.samples.iter().fold((Duration::ZERO, Duration::ZERO), |(b, a), s| (b + s.busy, a + s.alive))
}

fn ratio((busy, alive): (Duration, Duration)) -> f64 {
    if alive.is_zero() {
        0.0
    } else {
        nanos_of(busy) as f64 / nanos_of(alive) as f64
    }
}

pub fn summarize(label: &str, seed: u64, out: &SimOutput) -> RunSummary {
    let ok: Vec<_> = out.records.iter().filter(|r| r.outcome == Outcome::Ok).collect();
    let mut totals: Vec<u64> = ok.iter().map(|r| nanos_of(r.total_time().unwrap_or_default())).collect();
    totals.sort_unstable();
    let mean = |xs: &mut dyn Iterator<Item = u64>| {
        let (s, n) = xs.fold((0u128, 0u64), |(s, n), x| (s + x as u128, n + 1));
        if n == 0 {
            0.0
        } else {
            (s as f64 / n as f64) / 1e9
        }
    };
    let mut outcomes: BTreeMap<String, u64> = Outcome::ALL.iter().map(|o| (o.as_str().to_string(), 0)).collect();
    for r in &out.records {
        *outcomes.get_mut(r.outcome.as_str()).expect("all outcomes present") += 1;
    }
    let raw = fleet_utilization_raw(out);
    let count = |f: fn(&ScalingAction) -> bool| out.decisions.iter().filter(|d| f(&d.action)).count() as u32;
    let duration = out.schedule_end - SimTime::ZERO;
    RunSummary {
        label: label.to_string(),
        seed,
        duration_s: secs(duration),
        horizon_s: out.horizon.as_secs_f64(),
        requests_total: out.records.len() as u64,
        outcomes,
        throughput_rps: if duration.is_zero() { 0.0 } else { ok.len() as f64 / secs(duration) },
        mean_end_to_end_latency_s: mean(&mut totals.iter().copied()),
        p50_latency_s: percentile(&totals, 50.0) as f64 / 1e9,
        p95_latency_s: percentile(&totals, 95.0) as f64 / 1e9,
        p99_latency_s: percentile(&totals, 99.0) as f64 / 1e9,
        mean_queue_latency_s: mean(&mut ok.iter().map(|r| nanos_of(r.queue_time().unwrap_or_default()))),
        mean_gpu_utilization: ratio(raw),
        mean_gpu_utilization_timeseries: ratio(fleet_utilization_timeseries(out)),
        replica_seconds: secs(raw.1),
        peak_replicas: out.samples.iter().map(|s| s.ready_replicas + s.starting_replicas + s.draining_replicas).max().unwrap_or(0),
        scale_ups: count(|a| matches!(a, ScalingAction::ScaleUp(_))),
        scale_downs: count(|a| matches!(a, ScalingAction::ScaleDown(_))),
    }
}

fn label_of(cfg: &ExperimentConfig) -> String {
    match cfg.static_replicas {
        Some(n) => format!("static-{n}"),
        None => "dynamic".into(),
    }
}

/// Runs `cfg` in its configured mode.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let output = match cfg.mode {
        Mode::Virtual => Simulation::new(cfg.sim_config())?.run()?,
        Mode::Wallclock => crate::wallclock::run_blocking(cfg)?,
    };
    let summary = summarize(&label_of(cfg), cfg.seed, &output);
    Ok(ExperimentResult { output, summary })
}

fn opt_secs(d: Option<Duration>) -> String {
    d.map(|d| format!("{:.9}", secs(d))).unwrap_or_default()
}

pub fn timeseries_csv(out: &SimOutput) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TIMESERIES_COLUMNS)?;
    for s in &out.samples {
        let per_backend: Vec<String> = s.backend_utilization.iter().map(|(id, u)| format!("{id}:{u:.6}")).collect();
        w.write_record([
            format!("{:.3}", s.t.as_secs_f64()),
            s.client_count.to_string(),
            s.ready_replicas.to_string(),
            s.starting_replicas.to_string(),
            s.draining_replicas.to_string(),
            opt_secs(s.avg_queue_latency),
            opt_secs(s.interval_queue_latency),
            opt_secs(s.end_to_end_p50),
            s.completed.to_string(),
            s.fleet_utilization().map(|u| format!("{u:.6}")).unwrap_or_default(),
            per_backend.join(";"),
        ])?;
    }
    w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))
}

pub fn summary_json(summary: &RunSummary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes `timeseries.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, result: &ExperimentResult) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("timeseries.csv"), timeseries_csv(&result.output)?)?;
    std::fs::write(dir.join("summary.json"), summary_json(&result.summary))?;
    Ok(())
}

fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<(), ExperimentError> {
    if a.schedule != b.schedule {
        return Err(ExperimentError::Mismatch("schedules differ".into()));
    }
    if a.seed != b.seed {
        return Err(ExperimentError::Mismatch(format!("seeds differ ({} vs {})", a.seed, b.seed)));
    }
    if a.models != b.models {
        return Err(ExperimentError::Mismatch("model profiles differ".into()));
    }
    Ok(())
}

/// Runs every config (which must share schedule, seed and models) and returns
/// their summaries in order.
pub fn compare_configs(configs: &[ExperimentConfig]) -> Result<Vec<RunSummary>, ExperimentError> {
    if let Some((first, rest)) = configs.split_first() {
        for c in rest {
            same_experiment(first, c)?;
        }
    }
    configs.iter().map(|c| run_experiment(c).map(|r| r.summary)).collect()
}

/// The config as given (autoscaled or not) followed by one static fleet per
/// entry of `statics`.
pub fn compare(cfg: &ExperimentConfig, statics: &[u32]) -> Result<Vec<RunSummary>, ExperimentError> {
    let mut configs = vec![cfg.clone()];
    configs.extend(statics.iter().map(|&n| cfg.with_static(n)));
    compare_configs(&configs)
}

pub fn comparison_csv(rows: &[RunSummary]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_COLUMNS)?;
    for r in rows {
        let ok = r.outcomes.get(Outcome::Ok.as_str()).copied().unwrap_or(0);
        w.write_record([
            r.label.clone(),
            format!("{:.6}", r.mean_end_to_end_latency_s),
            format!("{:.6}", r.p99_latency_s),
            format!("{:.6}", r.mean_gpu_utilization),
            format!("{:.3}", r.replica_seconds),
            ok.to_string(),
            (r.requests_total - ok).to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 95.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn mismatched_schedules_are_rejected() {
        let a = ExperimentConfig::reference();
        let mut b = a.with_static(2);
        b.schedule.phases.pop();
        assert!(matches!(compare_configs(&[a.clone(), b]), Err(ExperimentError::Mismatch(_))));
        let mut c = a.with_static(2);
        c.seed += 1;
        assert!(matches!(compare_configs(&[a, c]), Err(ExperimentError::Mismatch(_))));
    }
}
