//! Deterministic in-memory link between a broker core and client sessions,
//! with seeded frame loss. Used to exercise QoS 1 delivery without sockets.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broker::{Action, BrokerCore, BrokerLimits, ConnId};
use crate::codec::{decode, encode, Packet, QoS};
use crate::session::{ClientOptions, ClientSession, SessionEvent};

/// Simulated milliseconds per [`LossyNet::step`].
pub const STEP_MS: u64 = 50;

struct Peer {
    session: ClientSession,
    conn: ConnId,
    to_broker: VecDeque<Vec<u8>>,
    to_client: VecDeque<Vec<u8>>,
}

pub struct LossyNet {
    broker: BrokerCore,
    peers: Vec<Peer>,
    next_conn: ConnId,
    rng: ChaCha8Rng,
    /// Probability that any single frame, in either direction, is dropped.
    pub loss: f64,
    now: u64,
    reconnects: usize,
}

fn frames(ps: Vec<Packet>) -> impl Iterator<Item = Vec<u8>> {
    ps.into_iter().map(|p| encode(&p).expect("session packets encode"))
}

impl LossyNet {
    pub fn new(limits: BrokerLimits, seed: u64) -> Self {
        Self {
            broker: BrokerCore::new(limits),
            peers: Vec::new(),
            next_conn: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss: 0.0,
            now: 0,
            reconnects: 0,
        }
    }

    /// Adds a client and opens its first connection; returns its index.
    pub fn add_client(&mut self, opts: ClientOptions) -> usize {
        self.peers.push(Peer { session: ClientSession::new(opts), conn: 0, to_broker: VecDeque::new(), to_client: VecDeque::new() });
        let i = self.peers.len() - 1;
        self.connect(i);
        i
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn reconnects(&self) -> usize {
        self.reconnects
    }

    pub fn session(&self, i: usize) -> &ClientSession {
        &self.peers[i].session
    }

    pub fn publish(&mut self, i: usize, topic: &str, payload: &[u8], qos: QoS) {
        let out = self.peers[i].session.publish(topic, payload, qos, false, self.now);
        self.peers[i].to_broker.extend(frames(out));
    }

    pub fn subscribe(&mut self, i: usize, filter: &str, qos: QoS) {
        let out = self.peers[i].session.subscribe(filter, qos, self.now);
        self.peers[i].to_broker.extend(frames(out));
    }

    pub fn take_inbound(&mut self, i: usize) -> Vec<crate::codec::Publish> {
        self.peers[i].session.take_inbound()
    }

    /// Drops the link of client `i` with whatever was in flight, then
    /// reconnects it.
    pub fn cut(&mut self, i: usize) {
        self.peers[i].session.on_transport_down();
        self.reconnects += 1;
        self.connect(i);
    }

    fn connect(&mut self, i: usize) {
        let conn = self.next_conn;
        self.next_conn += 1;
        self.broker.open(conn, self.now);
        let p = &mut self.peers[i];
        p.conn = conn;
        p.to_broker.clear();
        p.to_client.clear();
        let out = p.session.on_transport_up(self.now);
        p.to_broker.extend(frames(out));
    }

    fn dispatch(&mut self, actions: Vec<Action>) {
        for a in actions {
            if let Action::Send(c, p) = a {
                if let Some(peer) = self.peers.iter_mut().find(|x| x.conn == c) {
                    peer.to_client.push_back(encode(&p).expect("broker packets encode"));
                }
            }
        }
    }

    fn lost(&mut self) -> bool {
        self.loss > 0.0 && self.rng.random_bool(self.loss)
    }

    /// Advances time by [`STEP_MS`]: delivers queued frames both ways
    /// (subject to loss), ticks every state machine and reconnects clients
    /// whose session gave up.
    pub fn step(&mut self) {
        self.now += STEP_MS;
        for i in 0..self.peers.len() {
            while let Some(f) = self.peers[i].to_broker.pop_front() {
                if self.lost() {
                    continue;
                }
                let Ok(Some((p, _))) = decode(&f) else { continue };
                let a = self.broker.handle(self.peers[i].conn, p, self.now);
                self.dispatch(a);
            }
        }
        for i in 0..self.peers.len() {
            let mut lost_link = false;
            while let Some(f) = self.peers[i].to_client.pop_front() {
                if self.lost() {
                    continue;
                }
                let Ok(Some((p, _))) = decode(&f) else { continue };
                let (out, ev) = self.peers[i].session.handle(p, self.now);
                self.peers[i].to_broker.extend(frames(out));
                lost_link |= matches!(ev, Some(SessionEvent::Lost(_) | SessionEvent::Refused(_)));
            }
            let (out, ev) = self.peers[i].session.tick(self.now);
            self.peers[i].to_broker.extend(frames(out));
            if lost_link || matches!(ev, Some(SessionEvent::Lost(_))) {
                self.cut(i);
            }
        }
        let a = self.broker.tick(self.now);
        self.dispatch(a);
    }

    pub fn settle(&mut self, steps: usize) {
        for _ in 0..steps {
            self.step();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReport {
    pub sent: usize,
    /// Distinct messages that reached the subscriber.
    pub delivered: usize,
    pub duplicates: usize,
    pub dup_flagged: usize,
    pub steps: usize,
    pub reconnects: usize,
    pub retransmits: u64,
}

impl DeliveryReport {
    pub fn all_delivered(&self) -> bool {
        self.delivered == self.sent
    }
}

/// Publishes `n` numbered QoS 1 messages, one per step, from one client to a
/// subscriber over a link losing `loss` of all frames. With `cut_every`,
/// both links are also dropped every that many steps. Runs until every
/// message arrived or `max_steps` elapsed.
pub fn qos1_delivery(n: usize, loss: f64, cut_every: Option<usize>, seed: u64, max_steps: usize) -> DeliveryReport {
    let opts = |id: &str| ClientOptions { keep_alive_s: 10, retry_interval_ms: 1_000, connect_timeout_ms: 2_000, ..ClientOptions::new(id) };
    let mut net = LossyNet::new(BrokerLimits { retry_interval_ms: 1_000, ..Default::default() }, seed);
    let publisher = net.add_client(opts("pub"));
    let subscriber = net.add_client(opts("sub"));
    net.subscribe(subscriber, "farm/+/event/#", QoS::AtLeastOnce);
    net.settle(5);

    net.loss = loss;
    let mut received: BTreeMap<usize, usize> = BTreeMap::new();
    let mut dup_flagged = 0;
    let mut step = 0;
    while received.len() < n && step < max_steps {
        if step < n {
            net.publish(publisher, "farm/n1/event/irrigation", step.to_string().as_bytes(), QoS::AtLeastOnce);
        }
        if cut_every.is_some_and(|k| step > 0 && step % k == 0) {
            net.cut(publisher);
            net.cut(subscriber);
        }
        net.step();
        for p in net.take_inbound(subscriber) {
            if let Some(id) = std::str::from_utf8(&p.payload).ok().and_then(|s| s.parse().ok()) {
                *received.entry(id).or_default() += 1;
                dup_flagged += p.dup as usize;
            }
        }
        step += 1;
    }
    DeliveryReport {
        sent: n,
        delivered: received.len(),
        duplicates: received.values().map(|c| c - 1).sum(),
        dup_flagged,
        steps: step,
        reconnects: net.reconnects(),
        retransmits: net.session(publisher).stats().retransmits,
    }
}
