use thiserror::Error;

use crate::backend::{BackendId, BackendState};
use crate::request::RequestId;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backend {id} is {state:?}; operation not allowed")]
    InvalidState { id: BackendId, state: BackendState },

    #[error("record {request_id} violates timing invariants: {reason}")]
    InvariantViolation { request_id: RequestId, reason: String },

    #[error("no ready backend available")]
    NoBackend,

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("time went backwards: now {now} < last {last}")]
    NonMonotonicTime { now: u64, last: u64 },
}
