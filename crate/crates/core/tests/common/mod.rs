#![allow(dead_code)]

use std::time::Duration;

use gpufleet_core::*;

pub fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

pub fn secs(v: u64) -> Duration {
    Duration::from_secs(v)
}

/// 40 ms + 1 ms per item: batch 10 takes 50 ms.
pub fn calibrated_model() -> ModelProfile {
    ModelProfile::deterministic("particlenet", ms(40), ms(1))
}

pub fn client(think: Duration) -> ClientSpec {
    ClientSpec { model: "particlenet".into(), batch_size: 10, think_time: think, token: b"token".to_vec(), payload_size: 0 }
}

pub fn schedule(phases: &[(u64, u32)], think: Duration) -> PhaseSchedule {
    PhaseSchedule {
        phases: phases.iter().map(|&(d, c)| Phase { duration: secs(d), clients: c }).collect(),
        client: client(think),
    }
}

pub fn static_config(replicas: u32, phases: &[(u64, u32)], think: Duration) -> SimConfig {
    SimConfig::new(vec![calibrated_model()], FleetPolicy::Static { replicas }, schedule(phases, think))
}

pub fn autoscaled_config(phases: &[(u64, u32)], think: Duration) -> SimConfig {
    SimConfig::new(vec![calibrated_model()], FleetPolicy::Autoscaled(AutoscalerConfig::default()), schedule(phases, think))
}

/// ok records completing within `[from, to)` per second.
pub fn throughput(out: &SimOutput, from: Duration, to: Duration) -> f64 {
    let n = out
        .records
        .iter()
        .filter(|r| r.outcome == Outcome::Ok)
        .filter(|r| {
            let t = r.t_client_recv.unwrap().as_nanos();
            t >= from.as_nanos() as u64 && t < to.as_nanos() as u64
        })
        .count();
    n as f64 / (to - from).as_secs_f64()
}
