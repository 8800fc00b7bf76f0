//! Client requests and their timing records.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::BackendId;
use crate::error::{CoreError, Result};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceRequest {
    pub request_id: RequestId,
    pub model: String,
    pub batch_size: u32,
    pub token: Vec<u8>,
    pub payload_size: u32,
}

impl InferenceRequest {
    pub fn new(request_id: RequestId, model: impl Into<String>, batch_size: u32, token: impl Into<Vec<u8>>) -> Result<Self> {
        if batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(InferenceRequest { request_id, model: model.into(), batch_size, token: token.into(), payload_size: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    RejectedAuth,
    RejectedRate,
    RejectedCapacity,
    NoBackend,
}

impl Outcome {
    pub const ALL: [Outcome; 5] =
        [Outcome::Ok, Outcome::RejectedAuth, Outcome::RejectedRate, Outcome::RejectedCapacity, Outcome::NoBackend];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::RejectedAuth => "rejected_auth",
            Outcome::RejectedRate => "rejected_rate",
            Outcome::RejectedCapacity => "rejected_capacity",
            Outcome::NoBackend => "no_backend",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Timestamps stamped by the backend that served a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendTiming {
    pub backend_id: BackendId,
    pub t_enqueue: SimTime,
    pub t_compute_start: SimTime,
    pub t_compute_end: SimTime,
}

/// Full life of one request, from client send to client receive.
///
/// Rejected requests carry no backend timing. `t_client_recv` stays unset
/// while the request is still inside the system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub model: String,
    pub batch_size: u32,
    pub client_id: Option<u32>,
    pub t_client_send: SimTime,
    pub t_gateway_in: SimTime,
    pub backend: Option<BackendTiming>,
    pub t_client_recv: Option<SimTime>,
    pub outcome: Outcome,
}

impl RequestRecord {
    pub fn new(request: &InferenceRequest, t_client_send: SimTime, t_gateway_in: SimTime) -> Self {
        RequestRecord {
            request_id: request.request_id,
            model: request.model.clone(),
            batch_size: request.batch_size,
            client_id: None,
            t_client_send,
            t_gateway_in,
            backend: None,
            t_client_recv: None,
            outcome: Outcome::Ok,
        }
    }

    pub fn backend_id(&self) -> Option<BackendId> {
        self.backend.map(|b| b.backend_id)
    }

    pub fn queue_time(&self) -> Option<Duration> {
        self.backend.map(|b| b.t_compute_start.saturating_since(b.t_enqueue))
    }

    pub fn compute_time(&self) -> Option<Duration> {
        self.backend.map(|b| b.t_compute_end.saturating_since(b.t_compute_start))
    }

    pub fn total_time(&self) -> Option<Duration> {
        self.t_client_recv.map(|r| r.saturating_since(self.t_client_send))
    }

    /// Everything that is neither queueing nor compute.
    pub fn network_time(&self) -> Option<Duration> {
        let total = self.total_time()?;
        let busy = self.queue_time().unwrap_or_default() + self.compute_time().unwrap_or_default();
        total.checked_sub(busy)
    }

    /// Checks timestamp ordering for a finalized record.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Err(CoreError::InvariantViolation { request_id: self.request_id, reason: reason.into() });
        let Some(recv) = self.t_client_recv else {
            return fail("record not finalized");
        };
        if self.t_gateway_in < self.t_client_send {
            return fail("t_gateway_in < t_client_send");
        }
        match (self.outcome, self.backend) {
            (Outcome::Ok, None) => fail("ok record without backend timing"),
            (Outcome::Ok, Some(b)) => {
                let chain = [self.t_gateway_in, b.t_enqueue, b.t_compute_start, b.t_compute_end, recv];
                if chain.windows(2).any(|w| w[0] > w[1]) {
                    return fail("timestamps out of order");
                }
                Ok(())
            }
            (_, Some(_)) => fail("rejected record carries backend timing"),
            (_, None) if recv < self.t_gateway_in => fail("t_client_recv < t_gateway_in"),
            _ => Ok(()),
        }
    }
}
