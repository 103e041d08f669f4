//! Broker state machine, free of I/O. The transport feeds it decoded
//! packets and connection events and carries out the returned actions.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::codec::{ConnectReturn, Packet, Publish, QoS, Will, SUBACK_FAILURE};
use crate::topic::{matches_unchecked, validate_filter, validate_name};

pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrokerLimits {
    pub max_connections: usize,
    pub max_packet_bytes: usize,
    /// Unacknowledged QoS 1 deliveries are resent after this long.
    pub retry_interval_ms: u64,
    pub max_inflight: usize,
    /// Per-session queue for QoS 1 messages while offline or throttled.
    pub max_queued: usize,
}

impl Default for BrokerLimits {
    fn default() -> Self {
        Self { max_connections: 256, max_packet_bytes: 1 << 20, retry_interval_ms: 5_000, max_inflight: 32, max_queued: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(ConnId, Packet),
    Close(ConnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BrokerStats {
    pub published: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub wills: u64,
}

#[derive(Debug)]
struct Session {
    conn: Option<ConnId>,
    clean: bool,
    subs: BTreeMap<String, QoS>,
    /// In send order: (pid, message, last send time).
    inflight: VecDeque<(u16, Publish, u64)>,
    queued: VecDeque<Publish>,
    next_pid: u16,
}

impl Session {
    fn new(clean: bool) -> Self {
        Self { conn: None, clean, subs: BTreeMap::new(), inflight: VecDeque::new(), queued: VecDeque::new(), next_pid: 1 }
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
}

#[derive(Debug)]
struct Conn {
    client_id: Option<String>,
    keep_alive_ms: u64,
    last_seen: u64,
    will: Option<Will>,
}

#[derive(Debug)]
pub struct BrokerCore {
    limits: BrokerLimits,
    conns: HashMap<ConnId, Conn>,
    sessions: HashMap<String, Session>,
    retained: BTreeMap<String, Publish>,
    next_auto_id: u64,
    stats: BrokerStats,
}

impl BrokerCore {
    pub fn new(limits: BrokerLimits) -> Self {
        Self {
            limits,
            conns: HashMap::new(),
            sessions: HashMap::new(),
            retained: BTreeMap::new(),
            next_auto_id: 1,
            stats: BrokerStats::default(),
        }
    }

    pub fn limits(&self) -> &BrokerLimits {
        &self.limits
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    pub fn retained(&self, topic: &str) -> Option<&Publish> {
        self.retained.get(topic)
    }

    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }

    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    pub fn is_online(&self, client_id: &str) -> bool {
        self.sessions.get(client_id).is_some_and(|s| s.conn.is_some())
    }

    /// A transport connection was opened.
    pub fn open(&mut self, conn: ConnId, now: u64) {
        self.conns.insert(conn, Conn { client_id: None, keep_alive_ms: 0, last_seen: now, will: None });
    }

    /// The transport connection went away. Ungraceful drops publish the will.
    pub fn closed(&mut self, conn: ConnId, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        self.drop_conn(conn, true, now, &mut out);
        out
    }

    fn drop_conn(&mut self, conn: ConnId, publish_will: bool, now: u64, out: &mut Vec<Action>) {
        let Some(c) = self.conns.remove(&conn) else { return };
        if let Some(id) = &c.client_id {
            let clean = match self.sessions.get_mut(id) {
                Some(s) if s.conn == Some(conn) => {
                    s.conn = None;
                    s.clean
                }
                _ => false,
            };
            if clean {
                self.sessions.remove(id);
            }
        }
        if publish_will {
            if let Some(w) = c.will {
                self.stats.wills += 1;
                self.accept(Publish::new(w.topic, w.payload, w.qos, w.retain), now, out);
            }
        }
    }

    fn close(&mut self, conn: ConnId, now: u64, out: &mut Vec<Action>) {
        self.drop_conn(conn, true, now, out);
        out.push(Action::Close(conn));
    }

    /// Handles one decoded packet from `conn`.
    pub fn handle(&mut self, conn: ConnId, packet: Packet, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(c) = self.conns.get_mut(&conn) else { return out };
        c.last_seen = now;
        let client_id = c.client_id.clone();
        match (client_id, packet) {
            (None, Packet::Connect(cp)) => self.on_connect(conn, cp, now, &mut out),
            (None, _) | (Some(_), Packet::Connect(_)) => self.close(conn, now, &mut out),
            (Some(id), p) => self.on_packet(conn, &id, p, now, &mut out),
        }
        out
    }

    fn on_connect(&mut self, conn: ConnId, cp: crate::codec::Connect, now: u64, out: &mut Vec<Action>) {
        let refuse = |code, out: &mut Vec<Action>| {
            out.push(Action::Send(conn, Packet::ConnAck { session_present: false, code }));
            out.push(Action::Close(conn));
        };
        let online = self.sessions.values().filter(|s| s.conn.is_some()).count();
        if online >= self.limits.max_connections {
            self.conns.remove(&conn);
            return refuse(ConnectReturn::ServerUnavailable, out);
        }
        if cp.client_id.is_empty() && !cp.clean_session {
            self.conns.remove(&conn);
            return refuse(ConnectReturn::IdentifierRejected, out);
        }
        if let Some(w) = &cp.will {
            if validate_name(&w.topic).is_err() {
                self.conns.remove(&conn);
                out.push(Action::Close(conn));
                return;
            }
        }
        let id = if cp.client_id.is_empty() {
            self.next_auto_id += 1;
            format!("auto-{}", self.next_auto_id - 1)
        } else {
            cp.client_id.clone()
        };
        // take over an existing connection with the same client id
        if let Some(old) = self.sessions.get(&id).and_then(|s| s.conn) {
            self.close(old, now, out);
        }
        if cp.clean_session {
            self.sessions.remove(&id);
        }
        let session_present = self.sessions.contains_key(&id);
        let s = self.sessions.entry(id.clone()).or_insert_with(|| Session::new(cp.clean_session));
        s.clean = cp.clean_session;
        s.conn = Some(conn);
        let c = self.conns.get_mut(&conn).expect("conn registered");
        c.client_id = Some(id.clone());
        c.keep_alive_ms = cp.keep_alive as u64 * 1000;
        c.will = cp.will;
        out.push(Action::Send(conn, Packet::ConnAck { session_present, code: ConnectReturn::Accepted }));
        // resume: resend unacknowledged deliveries, then drain the queue
        let s = self.sessions.get_mut(&id).expect("session exists");
        for (pid, p, sent) in s.inflight.iter_mut() {
            *sent = now;
            out.push(Action::Send(conn, Packet::Publish(Publish { dup: true, pid: Some(*pid), ..p.clone() })));
        }
        self.drain(&id, now, out);
    }

    fn on_packet(&mut self, conn: ConnId, id: &str, p: Packet, now: u64, out: &mut Vec<Action>) {
        match p {
            Packet::Publish(p) => {
                if validate_name(&p.topic).is_err() {
                    return self.close(conn, now, out);
                }
                if let Some(pid) = p.pid {
                    out.push(Action::Send(conn, Packet::PubAck { pid }));
                }
                self.accept(p, now, out);
            }
            Packet::PubAck { pid } => {
                if let Some(s) = self.sessions.get_mut(id) {
                    s.inflight.retain(|(q, _, _)| *q != pid);
                }
                self.drain(id, now, out);
            }
            Packet::Subscribe { pid, filters } => {
                let mut codes = Vec::with_capacity(filters.len());
                let mut accepted = Vec::new();
                let s = self.sessions.get_mut(id).expect("connected session");
                for (f, q) in filters {
                    if validate_filter(&f).is_err() {
                        codes.push(SUBACK_FAILURE);
                        continue;
                    }
                    s.subs.insert(f.clone(), q);
                    codes.push(q as u8);
                    accepted.push((f, q));
                }
                out.push(Action::Send(conn, Packet::SubAck { pid, codes }));
                let matching: Vec<Publish> = self
                    .retained
                    .values()
                    .filter_map(|r| {
                        let q = accepted.iter().filter(|(f, _)| matches_unchecked(f, &r.topic)).map(|(_, q)| *q).max()?;
                        Some(Publish { qos: q.min(r.qos), retain: true, ..r.clone() })
                    })
                    .collect();
                for p in matching {
                    self.deliver(id, p, now, out);
                }
            }
            Packet::Unsubscribe { pid, filters } => {
                if let Some(s) = self.sessions.get_mut(id) {
                    for f in &filters {
                        s.subs.remove(f);
                    }
                }
                out.push(Action::Send(conn, Packet::UnsubAck { pid }));
            }
            Packet::PingReq => out.push(Action::Send(conn, Packet::PingResp)),
            Packet::Disconnect => {
                self.drop_conn(conn, false, now, out);
                out.push(Action::Close(conn));
            }
            // server-to-client packets are protocol errors here
            Packet::ConnAck { .. } | Packet::SubAck { .. } | Packet::UnsubAck { .. } | Packet::PingResp | Packet::Connect(_) => {
                self.close(conn, now, out)
            }
        }
    }

    /// A message entering the broker: retained store, then fan-out.
    fn accept(&mut self, p: Publish, now: u64, out: &mut Vec<Action>) {
        self.stats.published += 1;
        if p.retain {
            if p.payload.is_empty() {
                self.retained.remove(&p.topic);
            } else {
                self.retained.insert(p.topic.clone(), Publish { dup: false, pid: None, ..p.clone() });
            }
        }
        self.route(p, now, out);
    }

    fn route(&mut self, p: Publish, now: u64, out: &mut Vec<Action>) {
        let targets: Vec<(String, QoS)> = self
            .sessions
            .iter()
            .filter_map(|(id, s)| {
                let q = s.subs.iter().filter(|(f, _)| matches_unchecked(f, &p.topic)).map(|(_, q)| *q).max()?;
                Some((id.clone(), q.min(p.qos)))
            })
            .collect();
        for (id, q) in targets {
            self.deliver(&id, Publish { qos: q, retain: false, dup: false, pid: None, ..p.clone() }, now, out);
        }
    }

    fn deliver(&mut self, id: &str, p: Publish, now: u64, out: &mut Vec<Action>) {
        let Some(s) = self.sessions.get_mut(id) else { return };
        match (p.qos, s.conn) {
            (QoS::AtMostOnce, Some(conn)) => {
                self.stats.delivered += 1;
                out.push(Action::Send(conn, Packet::Publish(p)));
            }
            (QoS::AtMostOnce, None) => {}
            (QoS::AtLeastOnce, _) => {
                if s.queued.len() >= self.limits.max_queued {
                    s.queued.pop_front();
                    self.stats.dropped += 1;
                }
                s.queued.push_back(p);
                self.drain(id, now, out);
            }
        }
    }

    /// Moves queued QoS 1 messages into the in-flight window.
    fn drain(&mut self, id: &str, now: u64, out: &mut Vec<Action>) {
        let Some(s) = self.sessions.get_mut(id) else { return };
        let Some(conn) = s.conn else { return };
        while s.inflight.len() < self.limits.max_inflight {
            let Some(p) = s.queued.pop_front() else { break };
            let pid = s.alloc_pid();
            let p = Publish { pid: Some(pid), ..p };
            s.inflight.push_back((pid, p.clone(), now));
            self.stats.delivered += 1;
            out.push(Action::Send(conn, Packet::Publish(p)));
        }
    }

    /// Keep-alive enforcement and QoS 1 retransmission.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let expired: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| {
                let limit = if c.client_id.is_some() { c.keep_alive_ms * 3 / 2 } else { 10_000 };
                limit > 0 && now.saturating_sub(c.last_seen) > limit
            })
            .map(|(id, _)| *id)
            .collect();
        for conn in expired {
            self.close(conn, now, &mut out);
        }
        let retry = self.limits.retry_interval_ms;
        for s in self.sessions.values_mut() {
            let Some(conn) = s.conn else { continue };
            for (pid, p, sent) in s.inflight.iter_mut() {
                if now.saturating_sub(*sent) >= retry {
                    *sent = now;
                    out.push(Action::Send(conn, Packet::Publish(Publish { dup: true, pid: Some(*pid), ..p.clone() })));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Connect;

    fn connect(b: &mut BrokerCore, conn: ConnId, id: &str, clean: bool) -> Vec<Action> {
        b.open(conn, 0);
        b.handle(conn, Packet::Connect(Connect { clean_session: clean, ..Connect::new(id) }), 0)
    }

    fn sent_to(actions: &[Action], conn: ConnId) -> Vec<Packet> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send(c, p) if *c == conn => Some(p.clone()),
                _ => None,
            })
            .collect()
    }

    fn publishes(actions: &[Action], conn: ConnId) -> Vec<Publish> {
        sent_to(actions, conn)
            .into_iter()
            .filter_map(|p| match p {
                Packet::Publish(p) => Some(p),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn retained_is_delivered_after_suback() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        connect(&mut b, 1, "server", true);
        let cfg = Publish { pid: Some(1), ..Publish::new("farm/n1/config", b"{\"cooldown_s\":60}".to_vec(), QoS::AtLeastOnce, true) };
        b.handle(1, Packet::Publish(cfg), 1);
        connect(&mut b, 2, "n1", true);
        let a = b.handle(2, Packet::Subscribe { pid: 3, filters: vec![("farm/n1/config".into(), QoS::AtLeastOnce)] }, 2);
        let pkts = sent_to(&a, 2);
        assert!(matches!(pkts[0], Packet::SubAck { pid: 3, .. }));
        match &pkts[1] {
            Packet::Publish(p) => assert!(p.retain && p.topic == "farm/n1/config" && p.qos == QoS::AtLeastOnce),
            other => panic!("{other:?}"),
        }
        // empty retained payload clears
        b.handle(1, Packet::Publish(Publish::new("farm/n1/config", vec![], QoS::AtMostOnce, true)), 3);
        assert_eq!(b.retained_count(), 0);
    }

    #[test]
    fn one_retained_per_topic() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        connect(&mut b, 1, "p", true);
        for i in 0..5u8 {
            b.handle(1, Packet::Publish(Publish::new("t/a", vec![i + 1], QoS::AtMostOnce, true)), 1);
        }
        assert_eq!(b.retained_count(), 1);
        assert_eq!(b.retained("t/a").unwrap().payload, [5]);
    }

    #[test]
    fn routes_at_min_qos_without_duplicates() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        connect(&mut b, 1, "pub", true);
        connect(&mut b, 2, "sub", true);
        b.handle(
            2,
            Packet::Subscribe { pid: 1, filters: vec![("farm/#".into(), QoS::AtMostOnce), ("farm/+/event/#".into(), QoS::AtLeastOnce)] },
            1,
        );
        let a = b.handle(
            1,
            Packet::Publish(Publish { pid: Some(9), ..Publish::new("farm/n1/event/irrigation", b"x".to_vec(), QoS::AtLeastOnce, false) }),
            2,
        );
        assert_eq!(sent_to(&a, 1), vec![Packet::PubAck { pid: 9 }]);
        let got = publishes(&a, 2);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].qos, QoS::AtLeastOnce);
        let a = b.handle(1, Packet::Publish(Publish::new("farm/n1/telemetry", b"y".to_vec(), QoS::AtMostOnce, false)), 3);
        assert_eq!(publishes(&a, 2)[0].qos, QoS::AtMostOnce);
        // invalid filter gets a failure code
        let a = b.handle(2, Packet::Subscribe { pid: 2, filters: vec![("a/#/b".into(), QoS::AtMostOnce)] }, 4);
        assert_eq!(sent_to(&a, 2), vec![Packet::SubAck { pid: 2, codes: vec![SUBACK_FAILURE] }]);
    }

    #[test]
    fn will_on_ungraceful_drop_only() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        connect(&mut b, 1, "watcher", true);
        b.handle(1, Packet::Subscribe { pid: 1, filters: vec![("farm/+/status".into(), QoS::AtLeastOnce)] }, 0);
        let will = Will { topic: "farm/n1/status".into(), payload: b"{\"online\":false}".to_vec(), qos: QoS::AtLeastOnce, retain: true };
        for graceful in [true, false] {
            b.open(2, 0);
            b.handle(2, Packet::Connect(Connect { will: Some(will.clone()), ..Connect::new("n1") }), 0);
            let a = if graceful { b.handle(2, Packet::Disconnect, 1) } else { b.closed(2, 1) };
            assert_eq!(publishes(&a, 1).len(), usize::from(!graceful), "graceful={graceful}");
        }
        assert_eq!(b.retained("farm/n1/status").unwrap().payload, will.payload);
        assert_eq!(b.stats().wills, 1);
    }

    #[test]
    fn keep_alive_timeout_fires_will() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        b.open(1, 0);
        let will = Will { topic: "farm/n1/status".into(), payload: b"off".to_vec(), qos: QoS::AtMostOnce, retain: true };
        b.handle(1, Packet::Connect(Connect { keep_alive: 10, will: Some(will), ..Connect::new("n1") }), 0);
        assert!(b.tick(14_000).is_empty());
        b.handle(1, Packet::PingReq, 14_000);
        assert!(b.tick(28_000).is_empty());
        let a = b.tick(29_001);
        assert!(a.contains(&Action::Close(1)));
        assert!(b.retained("farm/n1/status").is_some());
    }

    #[test]
    fn persistent_session_resends_with_dup() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        connect(&mut b, 1, "pub", true);
        connect(&mut b, 2, "node", false);
        b.handle(2, Packet::Subscribe { pid: 1, filters: vec![("farm/node/cmd".into(), QoS::AtLeastOnce)] }, 0);
        let a = b.handle(
            1,
            Packet::Publish(Publish { pid: Some(1), ..Publish::new("farm/node/cmd", b"c1".to_vec(), QoS::AtLeastOnce, false) }),
            1,
        );
        let first = publishes(&a, 2);
        assert!(!first[0].dup);
        b.closed(2, 2);
        // delivered while offline: queued
        b.handle(1, Packet::Publish(Publish { pid: Some(2), ..Publish::new("farm/node/cmd", b"c2".to_vec(), QoS::AtLeastOnce, false) }), 3);
        b.open(3, 4);
        let a = b.handle(3, Packet::Connect(Connect { clean_session: false, ..Connect::new("node") }), 4);
        assert_eq!(sent_to(&a, 3)[0], Packet::ConnAck { session_present: true, code: ConnectReturn::Accepted });
        let again = publishes(&a, 3);
        assert_eq!(again.len(), 2);
        assert!(again[0].dup && again[0].payload == b"c1");
        assert!(!again[1].dup && again[1].payload == b"c2");
    }

    #[test]
    fn connection_limit_refuses() {
        let mut b = BrokerCore::new(BrokerLimits { max_connections: 1, ..Default::default() });
        connect(&mut b, 1, "a", true);
        let a = connect(&mut b, 2, "b", true);
        assert_eq!(
            a,
            vec![Action::Send(2, Packet::ConnAck { session_present: false, code: ConnectReturn::ServerUnavailable }), Action::Close(2)]
        );
    }

    #[test]
    fn first_packet_must_be_connect() {
        let mut b = BrokerCore::new(BrokerLimits::default());
        b.open(1, 0);
        assert_eq!(b.handle(1, Packet::PingReq, 0), vec![Action::Close(1)]);
    }
}
