//! Client-side protocol state, free of I/O: outbound queue, in-flight QoS 1
//! window, subscriptions, keep-alive and reconnect backoff.

use std::collections::{BTreeMap, VecDeque};

use crate::codec::{Connect, ConnectReturn, Packet, Publish, QoS, Will};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptions {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    pub will: Option<Will>,
    /// Retained QoS 1 message sent after every successful CONNACK.
    pub birth: Option<(String, Vec<u8>)>,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
    /// Bound on buffered QoS 1 messages (queued plus in flight).
    pub max_buffered: usize,
    pub max_inflight: usize,
    pub retry_interval_ms: u64,
    pub connect_timeout_ms: u64,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            keep_alive_s: 30,
            clean_session: false,
            will: None,
            birth: None,
            username: None,
            password: None,
            max_buffered: 1024,
            max_inflight: 16,
            retry_interval_ms: 5_000,
            connect_timeout_ms: 5_000,
            backoff_initial_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

/// Exponential reconnect delay: initial, doubling, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    initial_ms: u64,
    max_ms: u64,
    next_ms: u64,
}

impl Backoff {
    pub fn new(initial_ms: u64, max_ms: u64) -> Self {
        Self { initial_ms, max_ms, next_ms: initial_ms }
    }

    pub fn next_delay_ms(&mut self) -> u64 {
        let d = self.next_ms;
        self.next_ms = (self.next_ms * 2).min(self.max_ms);
        d
    }

    pub fn reset(&mut self) {
        self.next_ms = self.initial_ms;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Disconnected,
    /// CONNECT sent at the given time, waiting for CONNACK.
    Connecting(u64),
    Connected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    Connected {
        session_present: bool,
    },
    Refused(ConnectReturn),
    /// The link should be torn down and re-established.
    Lost(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClientStats {
    pub dropped: u64,
    pub dropped_qos0: u64,
    pub retransmits: u64,
    pub acked: u64,
}

#[derive(Debug)]
pub struct ClientSession {
    opts: ClientOptions,
    state: ConnState,
    queued: VecDeque<Publish>,
    inflight: VecDeque<(u16, Publish, u64)>,
    subs: BTreeMap<String, QoS>,
    next_pid: u16,
    last_tx: u64,
    ping_sent: Option<u64>,
    inbound: VecDeque<Publish>,
    stats: ClientStats,
}

impl ClientSession {
    pub fn new(opts: ClientOptions) -> Self {
        Self {
            opts,
            state: ConnState::Disconnected,
            queued: VecDeque::new(),
            inflight: VecDeque::new(),
            subs: BTreeMap::new(),
            next_pid: 1,
            last_tx: 0,
            ping_sent: None,
            inbound: VecDeque::new(),
            stats: ClientStats::default(),
        }
    }

    pub fn options(&self) -> &ClientOptions {
        &self.opts
    }

    pub fn state(&self) -> ConnState {
        self.state
    }

    pub fn is_connected(&self) -> bool {
        self.state == ConnState::Connected
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    /// QoS 1 messages not yet acknowledged, queued or in flight.
    pub fn buffered(&self) -> usize {
        self.queued.len() + self.inflight.len()
    }

    pub fn subscriptions(&self) -> &BTreeMap<String, QoS> {
        &self.subs
    }

    pub fn take_inbound(&mut self) -> Vec<Publish> {
        self.inbound.drain(..).collect()
    }

    fn alloc_pid(&mut self) -> u16 {
        loop {
            let pid = self.next_pid;
            self.next_pid = self.next_pid.checked_add(1).unwrap_or(1);
            if !self.inflight.iter().any(|(p, _, _)| *p == pid) {
                return pid;
            }
        }
    }

    fn emit(&mut self, out: &mut Vec<Packet>, p: Packet, now: u64) {
        self.last_tx = now;
        out.push(p);
    }

    /// The transport is up; returns the CONNECT to send.
    pub fn on_transport_up(&mut self, now: u64) -> Vec<Packet> {
        self.state = ConnState::Connecting(now);
        self.ping_sent = None;
        let c = Connect {
            client_id: self.opts.client_id.clone(),
            clean_session: self.opts.clean_session,
            keep_alive: self.opts.keep_alive_s,
            will: self.opts.will.clone(),
            username: self.opts.username.clone(),
            password: self.opts.password.clone(),
        };
        let mut out = Vec::new();
        self.emit(&mut out, Packet::Connect(c), now);
        out
    }

    pub fn on_transport_down(&mut self) {
        self.state = ConnState::Disconnected;
        self.ping_sent = None;
    }

    pub fn handle(&mut self, p: Packet, now: u64) -> (Vec<Packet>, Option<SessionEvent>) {
        let mut out = Vec::new();
        let ev = match p {
            Packet::ConnAck { session_present, code } => {
                if code != ConnectReturn::Accepted {
                    self.state = ConnState::Disconnected;
                    return (out, Some(SessionEvent::Refused(code)));
                }
                self.state = ConnState::Connected;
                // in-flight first, in original order, then the rest of the queue
                let resend: Vec<(u16, Publish)> = self.inflight.iter().map(|(pid, p, _)| (*pid, p.clone())).collect();
                for (pid, p) in resend {
                    self.stats.retransmits += 1;
                    self.emit(&mut out, Packet::Publish(Publish { dup: true, pid: Some(pid), ..p }), now);
                }
                for e in self.inflight.iter_mut() {
                    e.2 = now;
                }
                if !self.subs.is_empty() {
                    let filters: Vec<(String, QoS)> = self.subs.iter().map(|(f, q)| (f.clone(), *q)).collect();
                    let pid = self.alloc_pid();
                    self.emit(&mut out, Packet::Subscribe { pid, filters }, now);
                }
                if let Some((topic, payload)) = self.opts.birth.clone() {
                    self.queued.push_front(Publish::new(topic, payload, QoS::AtLeastOnce, true));
                }
                self.pump(now, &mut out);
                Some(SessionEvent::Connected { session_present })
            }
            Packet::Publish(p) => {
                if let Some(pid) = p.pid {
                    self.emit(&mut out, Packet::PubAck { pid }, now);
                }
                self.inbound.push_back(p);
                None
            }
            Packet::PubAck { pid } => {
                let before = self.inflight.len();
                self.inflight.retain(|(q, _, _)| *q != pid);
                if self.inflight.len() < before {
                    self.stats.acked += 1;
                }
                self.pump(now, &mut out);
                None
            }
            Packet::PingResp => {
                self.ping_sent = None;
                None
            }
            Packet::SubAck { .. } | Packet::UnsubAck { .. } => None,
            Packet::Connect(_) | Packet::Subscribe { .. } | Packet::Unsubscribe { .. } | Packet::PingReq | Packet::Disconnect => {
                Some(SessionEvent::Lost("unexpected packet from broker"))
            }
        };
        (out, ev)
    }

    fn pump(&mut self, now: u64, out: &mut Vec<Packet>) {
        if self.state != ConnState::Connected {
            return;
        }
        while self.inflight.len() < self.opts.max_inflight {
            let Some(p) = self.queued.pop_front() else { break };
            let pid = self.alloc_pid();
            let p = Publish { pid: Some(pid), dup: false, ..p };
            self.inflight.push_back((pid, p.clone(), now));
            self.emit(out, Packet::Publish(p), now);
        }
    }

    /// Queues or sends a message. QoS 0 is dropped while offline; QoS 1 is
    /// buffered up to `max_buffered`, dropping the oldest.
    pub fn publish(&mut self, topic: &str, payload: &[u8], qos: QoS, retain: bool, now: u64) -> Vec<Packet> {
        let mut out = Vec::new();
        let p = Publish::new(topic, payload.to_vec(), qos, retain);
        match qos {
            QoS::AtMostOnce if self.is_connected() => self.emit(&mut out, Packet::Publish(p), now),
            QoS::AtMostOnce => self.stats.dropped_qos0 += 1,
            QoS::AtLeastOnce => {
                if self.buffered() >= self.opts.max_buffered {
                    if self.queued.pop_front().is_none() {
                        self.inflight.pop_front();
                    }
                    self.stats.dropped += 1;
                }
                self.queued.push_back(p);
                self.pump(now, &mut out);
            }
        }
        out
    }

    /// Adds a subscription; a repeated filter keeps the higher QoS.
    pub fn subscribe(&mut self, filter: &str, qos: QoS, now: u64) -> Vec<Packet> {
        let q = self.subs.get(filter).map_or(qos, |&old| old.max(qos));
        self.subs.insert(filter.to_string(), q);
        let mut out = Vec::new();
        if self.is_connected() {
            let pid = self.alloc_pid();
            self.emit(&mut out, Packet::Subscribe { pid, filters: vec![(filter.to_string(), q)] }, now);
        }
        out
    }

    pub fn unsubscribe(&mut self, filter: &str, now: u64) -> Vec<Packet> {
        let mut out = Vec::new();
        if self.subs.remove(filter).is_some() && self.is_connected() {
            let pid = self.alloc_pid();
            self.emit(&mut out, Packet::Unsubscribe { pid, filters: vec![filter.to_string()] }, now);
        }
        out
    }

    pub fn disconnect(&mut self, now: u64) -> Vec<Packet> {
        let mut out = Vec::new();
        if self.is_connected() {
            self.emit(&mut out, Packet::Disconnect, now);
        }
        self.state = ConnState::Disconnected;
        out
    }

    /// Timers: CONNACK timeout, keep-alive pings and QoS 1 retries.
    pub fn tick(&mut self, now: u64) -> (Vec<Packet>, Option<SessionEvent>) {
        let mut out = Vec::new();
        match self.state {
            ConnState::Disconnected => return (out, None),
            ConnState::Connecting(since) => {
                if now.saturating_sub(since) >= self.opts.connect_timeout_ms {
                    return (out, Some(SessionEvent::Lost("CONNACK timeout")));
                }
                return (out, None);
            }
            ConnState::Connected => {}
        }
        let ka = self.opts.keep_alive_s as u64 * 1000;
        if ka > 0 {
            if let Some(sent) = self.ping_sent {
                if now.saturating_sub(sent) >= ka {
                    return (out, Some(SessionEvent::Lost("PINGRESP timeout")));
                }
            } else if now.saturating_sub(self.last_tx) >= ka * 3 / 4 {
                self.ping_sent = Some(now);
                self.emit(&mut out, Packet::PingReq, now);
            }
        }
        let retry = self.opts.retry_interval_ms;
        let due: Vec<(u16, Publish)> = self
            .inflight
            .iter_mut()
            .filter(|e| now.saturating_sub(e.2) >= retry)
            .map(|e| {
                e.2 = now;
                (e.0, e.1.clone())
            })
            .collect();
        for (pid, p) in due {
            self.stats.retransmits += 1;
            self.emit(&mut out, Packet::Publish(Publish { dup: true, pid: Some(pid), ..p }), now);
        }
        (out, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn connected(opts: ClientOptions) -> ClientSession {
        let mut s = ClientSession::new(opts);
        s.on_transport_up(0);
        s.handle(Packet::ConnAck { session_present: false, code: ConnectReturn::Accepted }, 0);
        s
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::new(500, 30_000);
        let seq: Vec<u64> = (0..9).map(|_| b.next_delay_ms()).collect();
        assert_eq!(seq, [500, 1000, 2000, 4000, 8000, 16000, 30000, 30000, 30000]);
        b.reset();
        assert_eq!(b.next_delay_ms(), 500);
    }

    #[test]
    fn offline_publishes_flush_in_order() {
        let mut s = ClientSession::new(ClientOptions::new("n1"));
        for i in 0..5u8 {
            assert!(s.publish("t", &[i], QoS::AtLeastOnce, false, 0).is_empty());
        }
        assert!(s.publish("t", b"q0", QoS::AtMostOnce, false, 0).is_empty());
        assert_eq!(s.stats().dropped_qos0, 1);
        s.on_transport_up(10);
        let (out, ev) = s.handle(Packet::ConnAck { session_present: true, code: ConnectReturn::Accepted }, 10);
        assert_eq!(ev, Some(SessionEvent::Connected { session_present: true }));
        let payloads: Vec<u8> = out
            .iter()
            .filter_map(|p| match p {
                Packet::Publish(p) => Some(p.payload[0]),
                _ => None,
            })
            .collect();
        assert_eq!(payloads, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn buffer_drops_oldest() {
        let mut s = ClientSession::new(ClientOptions { max_buffered: 3, ..ClientOptions::new("n1") });
        for i in 0..5u8 {
            s.publish("t", &[i], QoS::AtLeastOnce, false, 0);
        }
        assert_eq!((s.buffered(), s.stats().dropped), (3, 2));
        assert_eq!(s.queued.front().unwrap().payload, [2]);
    }

    #[test]
    fn retransmit_with_dup_until_acked() {
        let mut s = connected(ClientOptions::new("n1"));
        let out = s.publish("t", b"x", QoS::AtLeastOnce, false, 100);
        let Packet::Publish(p) = &out[0] else { panic!() };
        assert!(!p.dup);
        let pid = p.pid.unwrap();
        let (out, _) = s.tick(5_100);
        assert!(matches!(&out[..], [Packet::Publish(p)] if p.dup && p.pid == Some(pid)));
        s.handle(Packet::PubAck { pid }, 5_200);
        assert_eq!(s.buffered(), 0);
        let (out, _) = s.tick(20_000);
        assert!(out.iter().all(|p| !matches!(p, Packet::Publish(_))));
    }

    #[test]
    fn inflight_resent_on_reconnect() {
        let mut s = connected(ClientOptions::new("n1"));
        s.publish("t", b"x", QoS::AtLeastOnce, false, 0);
        s.on_transport_down();
        s.on_transport_up(50);
        let (out, _) = s.handle(Packet::ConnAck { session_present: true, code: ConnectReturn::Accepted }, 50);
        assert!(matches!(&out[0], Packet::Publish(p) if p.dup));
    }

    #[test]
    fn keep_alive_ping_before_deadline() {
        let mut s = connected(ClientOptions { keep_alive_s: 5, ..ClientOptions::new("n1") });
        let mut first_ping = None;
        for t in (0..5_000).step_by(100) {
            let (out, _) = s.tick(t);
            if out.contains(&Packet::PingReq) {
                first_ping = Some(t);
                break;
            }
        }
        assert!(first_ping.is_some_and(|t| t < 5_000), "{first_ping:?}");
        // no response within the keep-alive: link is declared lost
        let (_, ev) = s.tick(first_ping.unwrap() + 5_000);
        assert!(matches!(ev, Some(SessionEvent::Lost(_))));
    }

    #[test]
    fn subscribe_twice_keeps_highest() {
        let mut s = connected(ClientOptions::new("n1"));
        s.subscribe("farm/n1/cmd", QoS::AtLeastOnce, 0);
        s.subscribe("farm/n1/cmd", QoS::AtMostOnce, 0);
        assert_eq!(s.subscriptions().len(), 1);
        assert_eq!(s.subscriptions()["farm/n1/cmd"], QoS::AtLeastOnce);
    }

    #[test]
    fn connack_timeout() {
        let mut s = ClientSession::new(ClientOptions::new("n1"));
        s.on_transport_up(0);
        assert_eq!(s.tick(4_999).1, None);
        assert!(matches!(s.tick(5_000).1, Some(SessionEvent::Lost(_))));
    }

    #[test]
    fn inbound_qos1_is_acked() {
        let mut s = connected(ClientOptions::new("n1"));
        let p = Publish { pid: Some(4), ..Publish::new("farm/n1/cmd", b"{}".to_vec(), QoS::AtLeastOnce, false) };
        let (out, _) = s.handle(Packet::Publish(p.clone()), 1);
        assert_eq!(out, vec![Packet::PubAck { pid: 4 }]);
        assert_eq!(s.take_inbound(), vec![p]);
    }
}
