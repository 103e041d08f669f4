//! End-to-end over loopback TCP against the bundled broker.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use irrigo_mqtt::codec::{decode, encode, Connect, ConnectReturn, Packet, Publish};
use irrigo_mqtt::{node_client, BrokerLimits, ClientOptions, MqttClient, QoS, StandaloneBroker};

const WAIT: Duration = Duration::from_secs(5);

fn broker() -> StandaloneBroker {
    StandaloneBroker::start("127.0.0.1:0", BrokerLimits::default()).unwrap()
}

fn client(addr: &str, id: &str) -> MqttClient {
    MqttClient::connect(addr, ClientOptions::new(id), WAIT).unwrap()
}

fn wait_for(mut f: impl FnMut() -> bool) -> bool {
    let t = Instant::now();
    while t.elapsed() < WAIT {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    false
}

fn recv_on(c: &MqttClient, topic: &str) -> Option<Publish> {
    let t = Instant::now();
    while t.elapsed() < WAIT {
        match c.recv_timeout(Duration::from_millis(100)) {
            Some(p) if p.topic == topic => return Some(p),
            _ => {}
        }
    }
    None
}

#[test]
fn pub_sub_and_retained_after_subscribe() {
    let b = broker();
    let addr = b.local_addr().to_string();
    let server = client(&addr, "server");
    server.publish("farm/n1/config", br#"{"window":14}"#, QoS::AtLeastOnce, true);
    assert!(wait_for(|| b.handle().retained_payload("farm/n1/config").is_some()));

    let node = client(&addr, "n1");
    node.subscribe("farm/n1/#", QoS::AtLeastOnce);
    let got = recv_on(&node, "farm/n1/config").expect("retained config");
    assert!(got.retain);
    assert_eq!(got.payload, br#"{"window":14}"#);

    server.publish("farm/n1/cmd", b"{\"cmd\":\"pause\"}", QoS::AtLeastOnce, false);
    let got = recv_on(&node, "farm/n1/cmd").expect("live command");
    assert!(!got.retain);
    server.disconnect();
    node.disconnect();
}

#[test]
fn will_published_on_abrupt_drop() {
    let b = broker();
    let addr = b.local_addr().to_string();
    let watcher = client(&addr, "watcher");
    watcher.subscribe("farm/+/status", QoS::AtLeastOnce);

    let node = node_client(&addr, "n7").unwrap();
    assert!(node.wait_connected(WAIT));
    let birth = recv_on(&watcher, "farm/n7/status").expect("birth");
    assert!(String::from_utf8_lossy(&birth.payload).contains("\"online\":true"));

    node.abort();
    let will = recv_on(&watcher, "farm/n7/status").expect("will");
    assert!(String::from_utf8_lossy(&will.payload).contains("\"online\":false"));
    let retained = b.handle().retained_payload("farm/n7/status").unwrap();
    assert!(String::from_utf8_lossy(&retained).contains("\"online\":false"));
}

#[test]
fn graceful_disconnect_suppresses_will() {
    let b = broker();
    let addr = b.local_addr().to_string();
    let node = node_client(&addr, "n8").unwrap();
    assert!(node.wait_connected(WAIT));
    assert!(wait_for(|| b.handle().retained_payload("farm/n8/status").is_some()));
    node.disconnect();
    assert!(wait_for(|| b.handle().connection_count() == 0));
    let retained = b.handle().retained_payload("farm/n8/status").unwrap();
    assert!(String::from_utf8_lossy(&retained).contains("\"online\":true"));
}

#[test]
fn offline_queue_flushes_in_order_after_broker_restart() {
    let b = broker();
    let addr = b.local_addr().to_string();
    let opts = ClientOptions { backoff_initial_ms: 1_500, backoff_max_ms: 1_500, ..ClientOptions::new("n1") };
    let node = MqttClient::connect(&addr, opts, WAIT).unwrap();
    b.kill();
    assert!(wait_for(|| !node.is_connected()));

    for i in 0..50 {
        node.publish("farm/n1/event/irrigation", i.to_string().as_bytes(), QoS::AtLeastOnce, false);
    }
    node.publish("farm/n1/telemetry", b"lost", QoS::AtMostOnce, false);
    assert_eq!(node.buffered(), 50);
    assert_eq!(node.stats().dropped_qos0, 1);

    // same port; the new broker has no sessions, so the subscriber must be
    // in place before the node's next attempt, 1.5 s after the drop
    let b2 = StandaloneBroker::start(&addr, BrokerLimits::default()).unwrap();
    let sub = client(&addr, "server");
    sub.subscribe("farm/+/event/#", QoS::AtLeastOnce);

    let mut seen = Vec::new();
    let t = Instant::now();
    while seen.len() < 50 && t.elapsed() < Duration::from_secs(10) {
        if let Some(p) = sub.recv_timeout(Duration::from_millis(100)) {
            seen.push(String::from_utf8(p.payload).unwrap().parse::<usize>().unwrap());
        }
    }
    let want: Vec<usize> = (0..50).collect();
    assert_eq!(seen, want);
    assert!(wait_for(|| node.buffered() == 0));
    drop(b2);
}

fn raw_connect(addr: &str, id: &str) -> TcpStream {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(WAIT)).unwrap();
    s.write_all(&encode(&Packet::Connect(Connect::new(id))).unwrap()).unwrap();
    let mut buf = [0u8; 4];
    s.read_exact(&mut buf).unwrap();
    assert!(matches!(decode(&buf).unwrap(), Some((Packet::ConnAck { code: ConnectReturn::Accepted, .. }, 4))));
    s
}

#[test]
fn oversize_packet_disconnects() {
    let limits = BrokerLimits { max_packet_bytes: 1024, ..Default::default() };
    let b = StandaloneBroker::start("127.0.0.1:0", limits).unwrap();
    let addr = b.local_addr().to_string();
    let mut s = raw_connect(&addr, "big");
    let p = Publish::new("farm/n1/telemetry", vec![b'x'; 4096], QoS::AtMostOnce, false);
    let _ = s.write_all(&encode(&Packet::Publish(p)).unwrap());
    let mut rest = Vec::new();
    let n = s.read_to_end(&mut rest).unwrap_or(0);
    assert_eq!(n, 0, "expected the broker to close the connection");
    assert!(wait_for(|| b.handle().connection_count() == 0));
}

#[test]
fn connection_limit_refuses_extra_clients() {
    let limits = BrokerLimits { max_connections: 1, ..Default::default() };
    let b = StandaloneBroker::start("127.0.0.1:0", limits).unwrap();
    let addr = b.local_addr().to_string();
    let _first = raw_connect(&addr, "a");

    let mut s = TcpStream::connect(&addr).unwrap();
    s.set_read_timeout(Some(WAIT)).unwrap();
    s.write_all(&encode(&Packet::Connect(Connect::new("b"))).unwrap()).unwrap();
    let mut buf = [0u8; 4];
    s.read_exact(&mut buf).unwrap();
    assert!(matches!(decode(&buf).unwrap(), Some((Packet::ConnAck { code: ConnectReturn::ServerUnavailable, .. }, 4))));
}

#[test]
fn keepalive_answered() {
    let b = broker();
    let addr = b.local_addr().to_string();
    let mut s = raw_connect(&addr, "pinger");
    s.write_all(&encode(&Packet::PingReq).unwrap()).unwrap();
    let mut buf = [0u8; 2];
    s.read_exact(&mut buf).unwrap();
    assert_eq!(buf, [0xD0, 0x00]);
}
