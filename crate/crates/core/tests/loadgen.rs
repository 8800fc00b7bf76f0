//! Closed-loop client laws.

use std::time::Duration;

use gpufleet_core::*;

mod common;
use common::*;

#[test]
fn single_client_throughput() {
    let out = Simulation::new(static_config(1, &[(100, 1)], ms(50))).unwrap().run().unwrap();
    let x = throughput(&out, secs(10), secs(100));
    assert!((x - 10.0).abs() / 10.0 < 0.02, "{x}");
}

#[test]
fn throughput_law_unsaturated_with_network() {
    // 3 clients, 4 replicas, 5 ms each way: X = N / (s + Z + 2d)
    let mut cfg = static_config(4, &[(100, 3)], ms(20));
    cfg.network_delay = ms(5);
    let out = Simulation::new(cfg).unwrap().run().unwrap();
    let expected = 3.0 / (0.050 + 0.020 + 0.010);
    let x = throughput(&out, secs(10), secs(100));
    assert!((x - expected).abs() / expected < 0.03, "{x} vs {expected}");
}

#[test]
fn idle_phase_sends_nothing() {
    let out = Simulation::new(static_config(1, &[(10, 1), (10, 0), (10, 1)], ms(50))).unwrap().run().unwrap();
    let in_gap = out
        .records
        .iter()
        .filter(|r| r.t_client_send >= SimTime::from_secs(10) && r.t_client_send < SimTime::from_secs(20))
        .count();
    assert_eq!(in_gap, 0);
    assert!(out.records.len() >= 190, "{}", out.records.len());
}

#[test]
fn ten_clients_one_backend_saturates() {
    let out = Simulation::new(static_config(1, &[(120, 10)], Duration::ZERO)).unwrap().run().unwrap();
    let x = throughput(&out, secs(20), secs(120));
    assert!((x - 20.0).abs() / 20.0 < 0.02, "{x}");
    let lat: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.t_client_send >= SimTime::from_secs(20) && r.t_client_recv.unwrap() <= SimTime::from_secs(120))
        .map(|r| r.total_time().unwrap().as_secs_f64())
        .collect();
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    assert!((mean - 0.5).abs() / 0.5 < 0.02, "{mean}");
}

#[test]
fn at_most_one_request_in_flight_per_client_and_every_send_recorded() {
    let out = Simulation::new(static_config(2, &[(30, 3), (30, 7), (30, 2)], ms(30))).unwrap().run().unwrap();
    assert_eq!(out.clients_sent, out.clients_received);
    assert_eq!(out.clients_sent as usize, out.records.len());
    let mut per_client: std::collections::BTreeMap<u32, Vec<(SimTime, SimTime)>> = Default::default();
    for r in &out.records {
        per_client.entry(r.client_id.unwrap()).or_default().push((r.t_client_send, r.t_client_recv.unwrap()));
    }
    for spans in per_client.values_mut() {
        spans.sort();
        assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0), "overlapping requests for one client");
    }
}

#[test]
fn calibration_one_client_light_ten_clients_saturate() {
    let cal = calibrate(&calibrated_model(), loadgen::DEFAULT_CALIBRATION_SERVICE).unwrap();
    let one = Simulation::new(static_config(1, &[(60, 1)], cal.think_time)).unwrap().run().unwrap();
    let b = one.fleet.get(BackendId(0)).unwrap();
    let u = b.utilization(SimTime::ZERO, SimTime::from_secs(60)).unwrap();
    assert!((u - 0.5).abs() < 0.01, "{u}");
    let max_queue = one.records.iter().map(|r| r.queue_time().unwrap()).max().unwrap();
    assert_eq!(max_queue, Duration::ZERO);

    // ten clients: queue latency climbs to the closed-loop bound N/X - Z - s
    let ten = Simulation::new(static_config(1, &[(60, 10)], cal.think_time)).unwrap().run().unwrap();
    let late: Vec<f64> = ten
        .records
        .iter()
        .filter(|r| r.t_client_send > SimTime::from_secs(10))
        .map(|r| r.queue_time().unwrap().as_secs_f64())
        .collect();
    let mean = late.iter().sum::<f64>() / late.len() as f64;
    assert!((mean - (10.0 / 20.0 - 0.05 - 0.05)).abs() < 0.01, "{mean}");
}

#[test]
fn rejected_clients_back_off_and_retry() {
    // no replica ever becomes ready before the run ends: every request fails
    let mut cfg = static_config(1, &[(5, 1)], Duration::ZERO);
    cfg.gateway.auth_enabled = true;
    cfg.gateway.valid_tokens = vec![b"other".to_vec()];
    let out = Simulation::new(cfg).unwrap().run().unwrap();
    assert!(out.records.iter().all(|r| r.outcome == Outcome::RejectedAuth));
    // one attempt per 100 ms backoff
    assert_eq!(out.records.len(), 50);
    assert_eq!(loadgen::run_clients(static_config(1, &[(1, 1)], ms(50))).unwrap().len(), 10);
}
