//! Prometheus text exposition of a `MetricsRegistry`, and the `/metrics`
//! HTTP endpoint serving it.

use std::fmt::Write;
use std::future::Future;
use std::sync::Arc;

use axum::http::header;
use axum::routing::get;
use axum::Router;
use gpufleet_core::metrics::MetricsSnapshot;
use gpufleet_core::MetricsRegistry;

pub const CONTENT_TYPE: &str = "text/plain; version=0.0.4; charset=utf-8";

const GAUGES: [(&str, &str); 5] = [
    ("ready_replicas", "Replicas accepting requests."),
    ("starting_replicas", "Replicas still starting up."),
    ("active_clients", "Closed-loop clients currently running."),
    ("avg_queue_latency_seconds", "Pooled mean queue latency over the autoscaler window."),
    ("gpu_utilization", "Busy fraction of each replica over the last sample interval."),
];

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn value(v: f64) -> String {
    if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn labels<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let body: Vec<String> = pairs.into_iter().map(|(k, v)| format!("{k}=\"{}\"", escape(v))).collect();
    if body.is_empty() {
        String::new()
    } else {
        format!("{{{}}}", body.join(","))
    }
}

fn header(out: &mut String, name: &str, help: &str, kind: &str) {
    let _ = writeln!(out, "# HELP {name} {help}");
    let _ = writeln!(out, "# TYPE {name} {kind}");
}

pub fn render(snap: &MetricsSnapshot) -> String {
    let mut out = String::new();

    header(&mut out, "requests_total", "Finalized requests by model and outcome.", "counter");
    for ((model, outcome), n) in &snap.requests_total {
        let _ = writeln!(out, "requests_total{} {n}", labels([("model", model.as_str()), ("outcome", outcome.as_str())]));
    }

    header(&mut out, "request_latency_seconds_total", "Cumulative latency of ok requests by source.", "counter");
    for (source, secs) in &snap.latency_by_source_seconds {
        let _ = writeln!(out, "request_latency_seconds_total{} {}", labels([("source", *source)]), value(*secs));
    }

    header(&mut out, "end_to_end_latency_seconds", "End-to-end latency of ok requests.", "histogram");
    let h = &snap.end_to_end;
    for (le, n) in h.cumulative() {
        let le = value(le);
        let _ = writeln!(out, "end_to_end_latency_seconds_bucket{} {n}", labels([("le", le.as_str())]));
    }
    let _ = writeln!(out, "end_to_end_latency_seconds_sum {}", value(h.sum));
    let _ = writeln!(out, "end_to_end_latency_seconds_count {}", h.count);

    let known = GAUGES.iter().map(|&(n, help)| (n, help));
    let extra = snap.gauges.keys().filter(|k| !GAUGES.iter().any(|(n, _)| n == k)).map(|k| (k.as_str(), "Gauge."));
    for (name, help) in known.chain(extra) {
        header(&mut out, name, help, "gauge");
        for (ls, v) in snap.gauges.get(name).into_iter().flatten() {
            let _ = writeln!(out, "{name}{} {}", labels(ls.iter().map(|(k, v)| (k.as_str(), v.as_str()))), value(*v));
        }
    }
    out
}

pub fn router(registry: Arc<MetricsRegistry>) -> Router {
    Router::new().route(
        "/metrics",
        get(move || {
            let registry = registry.clone();
            async move { ([(header::CONTENT_TYPE, CONTENT_TYPE)], render(&registry.snapshot())) }
        }),
    )
}

/// Serves `/metrics` on `listener` until `shutdown` resolves.
pub async fn serve_metrics(
    registry: Arc<MetricsRegistry>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(registry)).with_graceful_shutdown(shutdown).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_values_are_escaped() {
        assert_eq!(labels([("a", "x\"y\\z\n")]), "{a=\"x\\\"y\\\\z\\n\"}");
        assert_eq!(value(5.0), "5");
        assert_eq!(value(0.25), "0.25");
    }

    #[test]
    fn empty_registry_still_has_headers() {
        let text = render(&MetricsRegistry::default().snapshot());
        assert!(text.contains("# TYPE requests_total counter"));
        assert!(text.contains("# TYPE ready_replicas gauge"));
        assert!(text.contains("end_to_end_latency_seconds_count 0"));
    }
}
