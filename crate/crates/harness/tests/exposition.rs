use std::sync::Arc;
use std::time::Duration;

use gpufleet::config::ExperimentConfig;
use gpufleet::experiment::run_experiment;
use gpufleet::exposition::{render, serve_metrics, CONTENT_TYPE};
use gpufleet_core::request::BackendTiming;
use gpufleet_core::*;
use prometheus_parse::{LineInfo, Scrape, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

fn ok_record(i: u64) -> RequestRecord {
    let req = InferenceRequest::new(RequestId(i), "m", 1, vec![]).unwrap();
    let t = SimTime::from_millis(i * 10);
    let mut r = RequestRecord::new(&req, t, t);
    r.backend = Some(BackendTiming {
        backend_id: BackendId(0),
        t_enqueue: t,
        t_compute_start: t,
        t_compute_end: t + Duration::from_millis(5),
    });
    r.t_client_recv = Some(t + Duration::from_millis(5));
    r
}

/// Parses with an independent exposition parser, failing on any line it
/// would silently skip.
fn parse_strict(text: &str) -> Scrape {
    for line in text.lines() {
        assert!(!matches!(LineInfo::parse(line), LineInfo::Ignored), "unparseable line: {line}");
        assert!(!line.ends_with(' '), "trailing space: {line:?}");
    }
    Scrape::parse(text.lines().map(|l| Ok(l.to_string()))).unwrap()
}

#[test]
fn counter_line_is_exact() {
    let m = MetricsRegistry::default();
    for i in 0..42 {
        m.record_request(&ok_record(i)).unwrap();
    }
    let text = render(&m.snapshot());
    assert!(text.lines().any(|l| l == r#"requests_total{model="m",outcome="ok"} 42"#), "{text}");
    let scrape = parse_strict(&text);
    let s = scrape.samples.iter().find(|s| s.metric == "requests_total").unwrap();
    assert_eq!(s.value, Value::Counter(42.0));
    assert_eq!(s.labels.get("outcome"), Some("ok"));
}

#[test]
fn gauge_line_is_exact() {
    let m = MetricsRegistry::default();
    m.set_gauge("ready_replicas", &[], 5.0);
    let text = render(&m.snapshot());
    assert!(text.lines().any(|l| l == "ready_replicas 5"));
    let scrape = parse_strict(&text);
    assert!(scrape.samples.iter().any(|s| s.metric == "ready_replicas" && s.value == Value::Gauge(5.0)));
}

#[test]
fn empty_registry_has_only_headers_and_zero_histogram() {
    let text = render(&MetricsRegistry::default().snapshot());
    let scrape = parse_strict(&text);
    for name in ["requests_total", "ready_replicas", "gpu_utilization", "end_to_end_latency_seconds"] {
        assert!(scrape.docs.contains_key(name), "{name}");
        assert!(text.contains(&format!("# TYPE {name} ")));
    }
    assert!(scrape.samples.iter().all(|s| s.metric.starts_with("end_to_end_latency_seconds")));
}

#[test]
fn full_experiment_scrape_round_trips() {
    let r = run_experiment(&ExperimentConfig::reference()).unwrap();
    let text = render(&r.output.metrics.snapshot());
    let scrape = parse_strict(&text);
    let ok = r.summary.outcomes["ok"] as f64;
    let counter = scrape
        .samples
        .iter()
        .find(|s| s.metric == "requests_total" && s.labels.get("outcome") == Some("ok"))
        .unwrap();
    assert_eq!(counter.value, Value::Counter(ok));
    let hist = scrape.samples.iter().find(|s| s.metric == "end_to_end_latency_seconds").unwrap();
    let Value::Histogram(buckets) = &hist.value else { panic!("{:?}", hist.value) };
    assert_eq!(buckets.last().unwrap().count, ok);
    assert!(buckets.last().unwrap().less_than.is_infinite());
    assert!(buckets.windows(2).all(|w| w[0].less_than < w[1].less_than && w[0].count <= w[1].count));
    let count = scrape.samples.iter().find(|s| s.metric == "end_to_end_latency_seconds_count").unwrap();
    assert_eq!(count.value, Value::Untyped(ok));
}

#[tokio::test]
async fn endpoint_serves_the_document() {
    let registry = Arc::new(MetricsRegistry::default());
    registry.set_gauge("ready_replicas", &[], 3.0);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_metrics(registry, listener, async {
        let _ = stopped.await;
    }));

    let mut conn = tokio::net::TcpStream::connect(addr).await.unwrap();
    conn.write_all(b"GET /metrics HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut response = String::new();
    conn.read_to_string(&mut response).await.unwrap();
    let (head, body) = response.split_once("\r\n\r\n").unwrap();
    assert!(head.starts_with("HTTP/1.1 200"), "{head}");
    assert!(head.to_ascii_lowercase().contains(&format!("content-type: {CONTENT_TYPE}")));
    assert!(body.lines().any(|l| l == "ready_replicas 3"));

    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}
