//! The single client-facing entry point: token authentication, admission
//! control and round-robin balancing over ready backends.

use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::backend::{BackendId, BackendState, EnqueueOutcome, Fleet};
use crate::error::{CoreError, Result};
use crate::request::{InferenceRequest, Outcome, RequestRecord};
use crate::time::SimTime;

/// Deny admission while a named metric is above `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetricLimit {
    pub metric: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub auth_enabled: bool,
    pub valid_tokens: Vec<Vec<u8>>,
    pub max_concurrent_connections: usize,
    pub external_metric_limit: Option<ExternalMetricLimit>,
    pub listen_address: Option<String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            auth_enabled: false,
            valid_tokens: Vec::new(),
            max_concurrent_connections: 1000,
            external_metric_limit: None,
            listen_address: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.auth_enabled && self.valid_tokens.is_empty() {
            return Err(CoreError::InvalidArgument("auth enabled but no valid tokens configured".into()));
        }
        if self.max_concurrent_connections == 0 {
            return Err(CoreError::InvalidArgument("max_concurrent_connections must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthDecision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Allow,
    Deny,
}

/// Checks `token` against every configured token without short-circuiting.
pub fn authenticate(token: &[u8], config: &GatewayConfig) -> AuthDecision {
    if !config.auth_enabled {
        return AuthDecision::Allow;
    }
    let hit = config.valid_tokens.iter().fold(subtle::Choice::from(0u8), |acc, valid| acc | valid.as_slice().ct_eq(token));
    if bool::from(hit) {
        AuthDecision::Allow
    } else {
        AuthDecision::Deny
    }
}

/// Connection-count and external-metric rate limiting.
pub fn admit(active_connections: usize, config: &GatewayConfig, external_metric: Option<f64>) -> Admission {
    if active_connections >= config.max_concurrent_connections {
        return Admission::Deny;
    }
    if let (Some(limit), Some(value)) = (&config.external_metric_limit, external_metric) {
        if value > limit.threshold {
            return Admission::Deny;
        }
    }
    Admission::Allow
}

/// Cursor into the ordered list of known backends.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundRobinState {
    cursor: usize,
}

impl RoundRobinState {
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Picks the first `Ready` backend at or after the cursor (wrapping) and
    /// moves the cursor just past it.
    pub fn select(&mut self, backends: &[(BackendId, BackendState)]) -> Result<BackendId> {
        let n = backends.len();
        if n == 0 {
            return Err(CoreError::NoBackend);
        }
        let start = self.cursor % n;
        for step in 0..n {
            let idx = (start + step) % n;
            let (id, state) = backends[idx];
            if state == BackendState::Ready {
                self.cursor = (idx + 1) % n;
                return Ok(id);
            }
        }
        Err(CoreError::NoBackend)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouteResult {
    /// Enqueued on `backend`; the record completes when the backend finishes.
    Accepted { backend: BackendId },
    /// Refused at the gateway; the record's outcome says why.
    Rejected(RequestRecord),
}

#[derive(Debug, Clone)]
pub struct Gateway {
    config: GatewayConfig,
    round_robin: RoundRobinState,
    in_flight: usize,
    peak_in_flight: usize,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Gateway { config, round_robin: RoundRobinState::default(), in_flight: 0, peak_in_flight: 0 })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Admitted requests whose response has not left the gateway yet.
    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight
    }

    /// authenticate → admit → select → enqueue.
    ///
    /// Invalid tokens never occupy a connection slot. A request is counted
    /// in flight only once a backend has accepted it; the caller must
    /// [`release`](Self::release) it when the response is delivered.
    pub fn route(
        &mut self,
        request: &InferenceRequest,
        t_client_send: SimTime,
        now: SimTime,
        fleet: &mut Fleet,
        external_metric: Option<f64>,
    ) -> RouteResult {
        let mut record = RequestRecord::new(request, t_client_send, now);
        let reject = |mut record: RequestRecord, outcome| {
            record.outcome = outcome;
            RouteResult::Rejected(record)
        };
        if authenticate(&request.token, &self.config) == AuthDecision::Deny {
            return reject(record, Outcome::RejectedAuth);
        }
        if admit(self.in_flight, &self.config, external_metric) == Admission::Deny {
            return reject(record, Outcome::RejectedRate);
        }
        let Ok(id) = self.round_robin.select(&fleet.snapshot()) else {
            return reject(record, Outcome::NoBackend);
        };
        let Some(backend) = fleet.get_mut(id) else {
            return reject(record, Outcome::NoBackend);
        };
        record.outcome = Outcome::Ok;
        match backend.enqueue(record.clone(), now) {
            Ok(EnqueueOutcome::Accepted) => {
                self.in_flight += 1;
                self.peak_in_flight = self.peak_in_flight.max(self.in_flight);
                RouteResult::Accepted { backend: id }
            }
            Ok(EnqueueOutcome::RejectedCapacity) => reject(record, Outcome::RejectedCapacity),
            Err(_) => reject(record, Outcome::NoBackend),
        }
    }

    pub fn release(&mut self) {
        debug_assert!(self.in_flight > 0, "release without matching admission");
        self.in_flight = self.in_flight.saturating_sub(1);
    }
}
