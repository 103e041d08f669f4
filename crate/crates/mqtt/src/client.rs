//! Blocking MQTT client: a background thread owns the socket, reconnects
//! with backoff and keeps the session; `publish` may be called from any
//! thread and never blocks on the network being down.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use irrigo_core::edgenode::{Inbound, Uplink};
use irrigo_core::schema::{topic, StatusPayload, TopicKind};

use crate::codec::{decode, encode, Packet, Publish, QoS, Will};
use crate::session::{Backoff, ClientOptions, ClientSession, ClientStats, SessionEvent};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot resolve {0}")]
    Resolve(String),
    #[error("not connected within {0:?}")]
    Timeout(Duration),
}

struct Inner {
    session: ClientSession,
    stream: Option<TcpStream>,
}

impl Inner {
    fn write(&mut self, packets: Vec<Packet>) {
        let Some(s) = self.stream.as_mut() else { return };
        for p in packets {
            let ok = encode(&p).map(|b| s.write_all(&b).is_ok()).unwrap_or(true);
            if !ok {
                let _ = s.shutdown(Shutdown::Both);
                self.stream = None;
                self.session.on_transport_down();
                return;
            }
        }
    }
}

struct Shared {
    inner: Mutex<Inner>,
    stop: AtomicBool,
    epoch: Instant,
    inbound_tx: Sender<Publish>,
}

impl Shared {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("client lock")
    }

    fn forward_inbound(&self, inner: &mut Inner) {
        for p in inner.session.take_inbound() {
            let _ = self.inbound_tx.send(p);
        }
    }
}

pub struct MqttClient {
    shared: Arc<Shared>,
    inbound: Mutex<Receiver<Publish>>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for MqttClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MqttClient").field("connected", &self.is_connected()).finish()
    }
}

impl MqttClient {
    /// Starts the background loop; connection happens asynchronously.
    pub fn start(addr: &str, opts: ClientOptions) -> Result<Self, ClientError> {
        let target = addr.to_socket_addrs().ok().and_then(|mut a| a.next()).ok_or_else(|| ClientError::Resolve(addr.into()))?;
        let (tx, rx) = channel();
        let backoff = Backoff::new(opts.backoff_initial_ms, opts.backoff_max_ms);
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner { session: ClientSession::new(opts), stream: None }),
            stop: AtomicBool::new(false),
            epoch: Instant::now(),
            inbound_tx: tx,
        });
        let bg = shared.clone();
        let thread =
            std::thread::Builder::new().name("mqtt-client".into()).spawn(move || run(bg, target, backoff)).expect("spawn client thread");
        Ok(Self { shared, inbound: Mutex::new(rx), thread: Some(thread) })
    }

    /// Starts and waits for the first CONNACK.
    pub fn connect(addr: &str, opts: ClientOptions, timeout: Duration) -> Result<Self, ClientError> {
        let c = Self::start(addr, opts)?;
        if c.wait_connected(timeout) {
            Ok(c)
        } else {
            Err(ClientError::Timeout(timeout))
        }
    }

    pub fn wait_connected(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.is_connected() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        self.is_connected()
    }

    pub fn is_connected(&self) -> bool {
        self.shared.lock().session.is_connected()
    }

    pub fn stats(&self) -> ClientStats {
        self.shared.lock().session.stats()
    }

    /// QoS 1 messages not yet acknowledged by the broker.
    pub fn buffered(&self) -> usize {
        self.shared.lock().session.buffered()
    }

    pub fn publish(&self, topic: &str, payload: &[u8], qos: QoS, retain: bool) {
        let now = self.shared.now();
        let mut inner = self.shared.lock();
        let pkts = inner.session.publish(topic, payload, qos, retain, now);
        inner.write(pkts);
    }

    pub fn subscribe(&self, filter: &str, qos: QoS) {
        let now = self.shared.now();
        let mut inner = self.shared.lock();
        let pkts = inner.session.subscribe(filter, qos, now);
        inner.write(pkts);
    }

    pub fn unsubscribe(&self, filter: &str) {
        let now = self.shared.now();
        let mut inner = self.shared.lock();
        let pkts = inner.session.unsubscribe(filter, now);
        inner.write(pkts);
    }

    pub fn try_recv(&self) -> Option<Publish> {
        self.inbound.lock().expect("inbound lock").try_recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Publish> {
        self.inbound.lock().expect("inbound lock").recv_timeout(timeout).ok()
    }

    pub fn drain(&self) -> Vec<Publish> {
        self.inbound.lock().expect("inbound lock").try_iter().collect()
    }

    /// Sends DISCONNECT (no will) and stops the loop.
    pub fn disconnect(mut self) {
        {
            let now = self.shared.now();
            let mut inner = self.shared.lock();
            let pkts = inner.session.disconnect(now);
            inner.write(pkts);
            if let Some(s) = inner.stream.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        self.stop_thread();
    }

    /// Drops the socket without DISCONNECT, as if the process died.
    pub fn abort(mut self) {
        if let Some(s) = self.shared.lock().stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.stop_thread();
    }

    fn stop_thread(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MqttClient {
    fn drop(&mut self) {
        if self.thread.is_some() {
            if let Some(s) = self.shared.lock().stream.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
            self.stop_thread();
        }
    }
}

fn sleep_unless_stopped(shared: &Shared, ms: u64) {
    let deadline = Instant::now() + Duration::from_millis(ms);
    while !shared.stop.load(Ordering::SeqCst) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn run(shared: Arc<Shared>, target: SocketAddr, mut backoff: Backoff) {
    while !shared.stop.load(Ordering::SeqCst) {
        let stream = match TcpStream::connect_timeout(&target, Duration::from_secs(2)) {
            Ok(s) => s,
            Err(_) => {
                sleep_unless_stopped(&shared, backoff.next_delay_ms());
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let _ = stream.set_read_timeout(Some(Duration::from_millis(20)));
        let Ok(mut reader) = stream.try_clone() else { continue };
        {
            let mut inner = shared.lock();
            inner.stream = Some(stream);
            let pkts = inner.session.on_transport_up(shared.now());
            inner.write(pkts);
        }
        let mut buf = Vec::with_capacity(4096);
        let mut chunk = [0u8; 4096];
        let reason = 'conn: loop {
            if shared.stop.load(Ordering::SeqCst) {
                break 'conn "stopped";
            }
            match reader.read(&mut chunk) {
                Ok(0) => break 'conn "closed by broker",
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
                Err(_) => break 'conn "read error",
            }
            loop {
                match decode(&buf) {
                    Ok(Some((p, used))) => {
                        buf.drain(..used);
                        let mut inner = shared.lock();
                        let (out, ev) = inner.session.handle(p, shared.now());
                        inner.write(out);
                        shared.forward_inbound(&mut inner);
                        match ev {
                            Some(SessionEvent::Connected { .. }) => backoff.reset(),
                            Some(SessionEvent::Refused(_)) => break 'conn "refused",
                            Some(SessionEvent::Lost(why)) => break 'conn why,
                            None => {}
                        }
                    }
                    Ok(None) => break,
                    Err(_) => break 'conn "malformed packet",
                }
            }
            let mut inner = shared.lock();
            let (out, ev) = inner.session.tick(shared.now());
            inner.write(out);
            if let Some(SessionEvent::Lost(why)) = ev {
                break 'conn why;
            }
            if inner.stream.is_none() {
                break 'conn "write error";
            }
        };
        log::debug!("mqtt link down: {reason}");
        {
            let mut inner = shared.lock();
            if let Some(s) = inner.stream.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
            inner.session.on_transport_down();
        }
        if !shared.stop.load(Ordering::SeqCst) {
            sleep_unless_stopped(&shared, backoff.next_delay_ms());
        }
    }
}

impl Uplink for MqttClient {
    fn publish(&mut self, topic: &str, payload: &[u8], qos: u8, retain: bool) {
        let q = if qos == 0 { QoS::AtMostOnce } else { QoS::AtLeastOnce };
        MqttClient::publish(self, topic, payload, q, retain);
    }

    fn poll_inbound(&mut self) -> Vec<Inbound> {
        self.drain().into_iter().map(|p| Inbound { topic: p.topic, payload: p.payload }).collect()
    }

    fn is_connected(&self) -> bool {
        MqttClient::is_connected(self)
    }
}

/// Client options for an edge node: persistent session, offline will and
/// online birth on the status topic.
pub fn node_options(node_id: &str) -> ClientOptions {
    let status = topic(node_id, TopicKind::Status);
    let payload =
        |online| serde_json::to_vec(&StatusPayload { online, node: Some(node_id.to_string()), ts: None }).expect("status serializes");
    ClientOptions {
        will: Some(Will { topic: status.clone(), payload: payload(false), qos: QoS::AtLeastOnce, retain: true }),
        birth: Some((status, payload(true))),
        ..ClientOptions::new(node_id)
    }
}

/// Starts a node client subscribed to its command and config topics.
pub fn node_client(addr: &str, node_id: &str) -> Result<MqttClient, ClientError> {
    let c = MqttClient::start(addr, node_options(node_id))?;
    c.subscribe(&topic(node_id, TopicKind::Cmd), QoS::AtLeastOnce);
    c.subscribe(&topic(node_id, TopicKind::Config), QoS::AtLeastOnce);
    Ok(c)
}
