//! Backend behaviour against analytic queueing results.

use std::sync::Arc;
use std::time::Duration;

use gpufleet_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

mod common;
use common::*;

struct OpenLoopRun {
    mean_wait: Duration,
    utilization: f64,
    accepted: u64,
    served: u64,
    fifo: bool,
    work_conserving: bool,
}

/// Poisson arrivals at `rate` onto one backend with deterministic `service`.
fn open_loop(rate: f64, service: Duration, n: usize, seed: u64) -> OpenLoopRun {
    let models = Arc::new(ModelRegistry::new([ModelProfile::deterministic("m", service, Duration::ZERO)]).unwrap());
    let mut b = BackendInstance::spawn(BackendId(0), Duration::ZERO, SimTime::ZERO, 100_000, models, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate).unwrap();
    let mut t = 0.0f64;
    let mut done = Vec::with_capacity(n);
    for i in 0..n {
        t += gap.sample(&mut rng);
        let now = SimTime::from_nanos((t * 1e9) as u64);
        done.extend(b.advance(now));
        let req = InferenceRequest::new(RequestId(i as u64), "m", 1, vec![]).unwrap();
        assert_eq!(b.enqueue(RequestRecord::new(&req, now, now), now).unwrap(), EnqueueOutcome::Accepted);
    }
    let end = SimTime::from_nanos((t * 1e9) as u64) + service * 100_000;
    done.extend(b.advance(end));
    let last_end = done.last().unwrap().backend.unwrap().t_compute_end;

    let total_wait: u128 = done.iter().map(|r| r.queue_time().unwrap().as_nanos()).sum();
    let fifo = done.windows(2).all(|w| w[0].request_id < w[1].request_id);
    // never idle while something waits: a positive wait means the unit was
    // busy until the start, i.e. start equals the previous end
    let work_conserving = done.windows(2).all(|w| {
        let (prev, cur) = (w[0].backend.unwrap(), w[1].backend.unwrap());
        cur.t_compute_start == cur.t_enqueue.max(prev.t_compute_end)
    });
    OpenLoopRun {
        mean_wait: Duration::from_nanos((total_wait / done.len() as u128) as u64),
        utilization: b.utilization(SimTime::ZERO, last_end).unwrap(),
        accepted: b.accepted_count(),
        served: b.served_count(),
        fifo,
        work_conserving,
    }
}

fn md1_wait(rho: f64, service: f64) -> f64 {
    rho * service / (2.0 * (1.0 - rho))
}

#[test]
fn md1_mean_wait_at_half_load() {
    let run = open_loop(10.0, ms(50), 100_000, 1);
    let expected = md1_wait(0.5, 0.05);
    assert!((expected - 0.025).abs() < 1e-12);
    let got = run.mean_wait.as_secs_f64();
    assert!((got - expected).abs() / expected < 0.05, "mean wait {got} vs {expected}");
    assert!((run.utilization - 0.5).abs() / 0.5 < 0.02, "utilization {}", run.utilization);
    assert!(run.fifo && run.work_conserving);
    assert_eq!(run.accepted, run.served);
}

#[test]
fn md1_mean_wait_across_loads() {
    for (rho, seed) in [(0.3, 2), (0.8, 3)] {
        let rate = rho / 0.05;
        let run = open_loop(rate, ms(50), 200_000, seed);
        let expected = md1_wait(rho, 0.05);
        let got = run.mean_wait.as_secs_f64();
        assert!((got - expected).abs() / expected < 0.05, "rho {rho}: {got} vs {expected}");
        assert!(run.utilization <= 1.0);
    }
}

#[test]
fn closed_loop_without_think_saturates() {
    let out = Simulation::new(static_config(1, &[(200, 1)], Duration::ZERO)).unwrap().run().unwrap();
    let b = out.fleet.get(BackendId(0)).unwrap();
    let u = b.utilization(SimTime::ZERO, SimTime::from_secs(200)).unwrap();
    assert!(u > 0.999, "{u}");
}

#[test]
fn closed_loop_with_equal_think_is_half_busy() {
    let out = Simulation::new(static_config(1, &[(200, 1)], ms(50))).unwrap().run().unwrap();
    let b = out.fleet.get(BackendId(0)).unwrap();
    let u = b.utilization(SimTime::ZERO, SimTime::from_secs(200)).unwrap();
    assert!((u - 0.5).abs() / 0.5 < 0.02, "{u}");
}
