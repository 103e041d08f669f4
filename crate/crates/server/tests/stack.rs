//! Broker, server and a live node wired together over loopback.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use irrigo_core::edgenode::{EdgeNode, Mode, NodeConfig};
use irrigo_core::telemetry::SensorSample;
use irrigo_mqtt::{node_client, BrokerLimits, ClientOptions, MqttClient};
use irrigo_server::{EdgeServer, Query, RecordKind, ServerConfig};
use serde_json::Value;

const T0: i64 = 1_700_000_000_000;

fn wait_for(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let t = Instant::now();
    while t.elapsed() < limit {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}

#[tokio::test(flavor = "multi_thread")]
async fn dashboard_actions_round_trip_through_the_node() {
    let broker = irrigo_mqtt::server::spawn("127.0.0.1:0", BrokerLimits::default()).await.unwrap();
    let addr = broker.local_addr().to_string();
    let dir = tempfile::tempdir().unwrap();

    let a = addr.clone();
    let client = tokio::task::spawn_blocking(move || MqttClient::connect(&a, ClientOptions::new("edge-server"), Duration::from_secs(5)))
        .await
        .unwrap()
        .unwrap();
    let client = Arc::new(client);
    let server = EdgeServer::new(ServerConfig::new(dir.path()), client.clone()).unwrap();
    let _ingest = server.spawn_ingest(client);
    let (http_addr, _) = irrigo_server::spawn("127.0.0.1:0", server.clone()).await.unwrap();
    let base = format!("http://{http_addr}");
    let http = reqwest::Client::new();

    let cfg = NodeConfig { node_id: "n1".into(), window_len: 2, sample_period_ms: 1000, mode: Mode::Rule, ..NodeConfig::default() };
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let node_thread = std::thread::spawn(move || {
        let uplink = node_client(&addr, "n1").unwrap();
        assert!(uplink.wait_connected(Duration::from_secs(5)));
        let mut node = EdgeNode::new(cfg, None).unwrap().with_uplink(Box::new(uplink));
        node.keep_transcript(true);
        node.announce(T0);
        let mut ts = T0;
        while !flag.load(Ordering::SeqCst) {
            node.process_sample(SensorSample::new(ts, 3000.0, 21.5, 84.0, 150.0)).unwrap();
            ts += 1000;
            std::thread::sleep(Duration::from_millis(20));
        }
        node
    });

    assert!(wait_for(Duration::from_secs(5), || server.record_count() >= 3), "telemetry reaches the store");

    let r = http.put(format!("{base}/api/nodes/n1/config")).body(r#"{"cooldown_s": 300}"#).send().await.unwrap();
    assert_eq!(r.status(), 200);

    let r = http.post(format!("{base}/api/nodes/n1/cmd")).body(r#"{"type":"irrigate_now","ml":5}"#).send().await.unwrap();
    assert_eq!(r.status(), 202);

    let s = server.clone();
    let manual = tokio::task::spawn_blocking(move || {
        wait_for(Duration::from_secs(5), || {
            s.query(&Query::new("n1").kind(RecordKind::Event))
                .unwrap()
                .iter()
                .any(|r| r.payload["trigger"] == "manual" && r.payload["dispensed_ml"] == 5.0)
        })
    })
    .await
    .unwrap();
    assert!(manual, "manual event row stored");

    let ev: Value = http.get(format!("{base}/api/nodes/n1/events")).send().await.unwrap().json().await.unwrap();
    assert!(ev["events"].as_array().unwrap().iter().any(|e| e["payload"]["trigger"] == "manual"));
    let nodes: Value = http.get(format!("{base}/api/nodes")).send().await.unwrap().json().await.unwrap();
    assert_eq!(nodes[0]["online"], true);

    stop.store(true, Ordering::SeqCst);
    let node = node_thread.join().unwrap();
    assert_eq!(node.config().cooldown_s, 300.0, "retained config applied on the node");
    assert!(node.transcript().iter().any(|l| l.contains("config applied")));
    let csv = http.get(format!("{base}/api/nodes/n1/export.csv")).send().await.unwrap().text().await.unwrap();
    assert!(csv.starts_with("soil_adc,light,temperature,humidity,water_ml\n"));
    assert!(csv.lines().count() > 1);
}
