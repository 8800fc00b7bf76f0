//! Queue-latency driven horizontal autoscaler.
//!
//! Every poll the autoscaler pools the queue-latency samples of all serving
//! backends over `metric_window` and applies the proportional rule
//! `desired = ceil(current * metric / target)` with a tolerance dead-band.
//! Scale-ups take effect immediately; scale-downs only go as low as the
//! largest recommendation seen during `downscale_stabilization`, and excess
//! replicas are drained rather than killed.

use std::collections::VecDeque;
use std::time::Duration;

use crate::backend::{BackendState, Fleet};
use crate::error::{CoreError, Result};
use crate::metrics::MetricsRegistry;
use crate::time::{nanos, SimTime};

#[derive(Debug, Clone, PartialEq)]
pub struct AutoscalerConfig {
    pub target_queue_latency: Duration,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub poll_interval: Duration,
    pub tolerance: f64,
    pub downscale_stabilization: Duration,
    pub metric_window: Duration,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        AutoscalerConfig {
            target_queue_latency: Duration::from_millis(100),
            min_replicas: 1,
            max_replicas: 10,
            poll_interval: Duration::from_secs(5),
            tolerance: 0.10,
            downscale_stabilization: Duration::from_secs(60),
            metric_window: Duration::from_secs(30),
        }
    }
}

impl AutoscalerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidArgument(m.to_string()));
        if self.min_replicas < 1 {
            return bad("min_replicas must be >= 1");
        }
        if self.min_replicas > self.max_replicas {
            return bad("min_replicas must be <= max_replicas");
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return bad("tolerance must be in [0, 1)");
        }
        if self.target_queue_latency.is_zero() {
            return bad("target_queue_latency must be > 0");
        }
        if self.poll_interval.is_zero() {
            return bad("poll_interval must be > 0");
        }
        if self.metric_window.is_zero() {
            return bad("metric_window must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingAction {
    None,
    ScaleUp(u32),
    ScaleDown(u32),
}

/// Proportional replica recommendation.
///
/// Inside the tolerance band the current count is returned unchanged;
/// otherwise `ceil(current * metric / target)` clamped to `[min, max]`.
pub fn desired_replicas(
    current: u32,
    metric: Duration,
    target: Duration,
    tolerance: f64,
    min_replicas: u32,
    max_replicas: u32,
) -> Result<u32> {
    if target.is_zero() {
        return Err(CoreError::InvalidArgument("target must be > 0".into()));
    }
    if current < 1 {
        return Err(CoreError::InvalidArgument("current replicas must be >= 1".into()));
    }
    let (m, t) = (nanos(metric) as u128, nanos(target) as u128);
    if (m as f64 - t as f64).abs() <= tolerance * t as f64 {
        return Ok(current);
    }
    let raw = (u128::from(current) * m).div_ceil(t);
    let raw = u32::try_from(raw).unwrap_or(u32::MAX);
    Ok(raw.clamp(min_replicas, max_replicas))
}

/// Pooled mean of all queue-latency samples in `(now - window, now]` over
/// `Ready` and `Draining` backends. `None` when there are no samples.
pub fn collect_metric(fleet: &Fleet, metrics: &MetricsRegistry, now: SimTime, window: Duration) -> Option<Duration> {
    let (sum, count) = fleet
        .iter()
        .filter(|b| matches!(b.state(), BackendState::Ready | BackendState::Draining))
        .map(|b| metrics.queue_latency_sum_count(b.id(), now, window))
        .fold((0.0, 0usize), |(s, c), (bs, bc)| (s + bs, c + bc));
    (count > 0).then(|| Duration::from_nanos((sum / count as f64).round() as u64))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AutoscalerState {
    pub current_replicas: u32,
    pub desired_history: VecDeque<(SimTime, u32)>,
    pub last_poll: Option<SimTime>,
    pub last_metric: Option<Duration>,
}

/// One reconcile step, kept for plotting and debugging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub at: SimTime,
    pub metric: Option<Duration>,
    pub current: u32,
    pub desired: u32,
    pub action: ScalingAction,
}

#[derive(Debug, Clone)]
pub struct Autoscaler {
    config: AutoscalerConfig,
    state: AutoscalerState,
}

impl Autoscaler {
    pub fn new(config: AutoscalerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Autoscaler { config, state: AutoscalerState::default() })
    }

    pub fn config(&self) -> &AutoscalerConfig {
        &self.config
    }

    pub fn state(&self) -> &AutoscalerState {
        &self.state
    }

    /// Time of the next poll.
    pub fn next_poll(&self) -> SimTime {
        match self.state.last_poll {
            Some(t) => t + self.config.poll_interval,
            None => SimTime::ZERO + self.config.poll_interval,
        }
    }

    /// Reads the metric, records the recommendation and resizes `fleet`.
    pub fn reconcile(&mut self, fleet: &mut Fleet, metrics: &MetricsRegistry, now: SimTime) -> Result<Decision> {
        if let Some(last) = self.state.last_poll {
            if now < last + self.config.poll_interval {
                return Err(CoreError::InvalidArgument(format!("reconcile at {now} before next poll {}", self.next_poll())));
            }
        }
        let cfg = &self.config;
        let current = u32::try_from(fleet.active_replicas()).unwrap_or(u32::MAX);
        let metric = collect_metric(fleet, metrics, now, cfg.metric_window);
        let desired = match (metric, current) {
            (_, 0) => cfg.min_replicas,
            (None, c) => c,
            (Some(m), c) => desired_replicas(c, m, cfg.target_queue_latency, cfg.tolerance, cfg.min_replicas, cfg.max_replicas)?,
        }
        .clamp(cfg.min_replicas, cfg.max_replicas);

        let history = &mut self.state.desired_history;
        history.push_back((now, desired));
        let horizon = now.saturating_sub(cfg.downscale_stabilization);
        while history.front().is_some_and(|&(t, _)| t < horizon) {
            history.pop_front();
        }
        let stabilized = history.iter().map(|&(_, d)| d).max().unwrap_or(desired);

        let action = if desired > current {
            for _ in current..desired {
                fleet.spawn(now);
            }
            ScalingAction::ScaleUp(desired - current)
        } else if stabilized < current {
            let n = current - stabilized;
            fleet.drain_highest(n as usize, now);
            ScalingAction::ScaleDown(n)
        } else {
            ScalingAction::None
        };

        self.state.current_replicas = u32::try_from(fleet.active_replicas()).unwrap_or(u32::MAX);
        self.state.last_poll = Some(now);
        self.state.last_metric = metric;
        Ok(Decision { at: now, metric, current, desired, action })
    }
}
