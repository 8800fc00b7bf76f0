//! Building blocks for a simulated GPU inference service.
//!
//! The crate models a fleet of GPU inference servers sitting behind a single
//! authenticated, rate-limited, round-robin gateway, an autoscaler driven by
//! average queue latency, and closed-loop clients following a phase schedule.
//! Everything runs on integer-nanosecond time so that virtual-time runs are
//! exactly reproducible from a seed.

pub mod autoscaler;
pub mod backend;
pub mod error;
pub mod gateway;
pub mod loadgen;
pub mod metrics;
pub mod model;
pub mod request;
pub mod sim;
pub mod time;

pub use autoscaler::{desired_replicas, Autoscaler, AutoscalerConfig, AutoscalerState, Decision, ScalingAction};
pub use backend::{BackendId, BackendInstance, BackendState, EnqueueOutcome, Fleet};
pub use error::{CoreError, Result};
pub use gateway::{Admission, AuthDecision, Gateway, GatewayConfig, RoundRobinState, RouteResult};
pub use loadgen::{calibrate, ClientSpec, Phase, PhaseSchedule};
pub use metrics::{MetricsRegistry, SlidingWindow};
pub use model::{Jitter, ModelProfile, ModelRegistry};
pub use request::{BackendTiming, InferenceRequest, Outcome, RequestId, RequestRecord};
pub use sim::{take_sample, FleetPolicy, Sample, SimConfig, SimOutput, Simulation};
pub use time::{ClockMode, SimTime, TimeSource};
