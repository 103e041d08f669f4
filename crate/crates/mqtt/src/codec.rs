//! MQTT 3.1.1 wire format for the packet subset used here (QoS 0 and 1).

use thiserror::Error;

pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
pub const PROTOCOL_NAME: &str = "MQTT";
pub const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("remaining length exceeds 4 bytes")]
    LengthOverflow,
    #[error("value {0} does not fit a remaining length")]
    LengthTooLarge(usize),
    #[error("malformed fixed header: {0}")]
    FixedHeader(String),
    #[error("unsupported packet type {0}")]
    UnsupportedType(u8),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("packet body truncated")]
    Truncated,
    #[error("{0} trailing bytes inside packet")]
    Trailing(usize),
    #[error("invalid utf-8 string")]
    Utf8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        match v {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(CodecError::Protocol("QoS 2 is not supported".into())),
            _ => Err(CodecError::Protocol(format!("invalid QoS {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Will {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub clean_session: bool,
    pub keep_alive: u16,
    pub will: Option<Will>,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

impl Connect {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self { client_id: client_id.into(), clean_session: true, keep_alive: 30, will: None, username: None, password: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturn {
    Accepted = 0,
    BadProtocol = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
}

impl ConnectReturn {
    fn from_u8(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            0 => ConnectReturn::Accepted,
            1 => ConnectReturn::BadProtocol,
            2 => ConnectReturn::IdentifierRejected,
            3 => ConnectReturn::ServerUnavailable,
            4 => ConnectReturn::BadCredentials,
            5 => ConnectReturn::NotAuthorized,
            _ => return Err(CodecError::Protocol(format!("unknown CONNACK code {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present exactly when `qos` is 1.
    pub pid: Option<u16>,
    pub payload: Vec<u8>,
}

impl Publish {
    pub fn new(topic: impl Into<String>, payload: impl Into<Vec<u8>>, qos: QoS, retain: bool) -> Self {
        Self { dup: false, qos, retain, topic: topic.into(), pid: None, payload: payload.into() }
    }
}

pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck {
        session_present: bool,
        code: ConnectReturn,
    },
    Publish(Publish),
    PubAck {
        pid: u16,
    },
    Subscribe {
        pid: u16,
        filters: Vec<(String, QoS)>,
    },
    /// Granted QoS per filter, or [`SUBACK_FAILURE`].
    SubAck {
        pid: u16,
        codes: Vec<u8>,
    },
    Unsubscribe {
        pid: u16,
        filters: Vec<String>,
    },
    UnsubAck {
        pid: u16,
    },
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn name(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::ConnAck { .. } => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::PubAck { .. } => "PUBACK",
            Packet::Subscribe { .. } => "SUBSCRIBE",
            Packet::SubAck { .. } => "SUBACK",
            Packet::Unsubscribe { .. } => "UNSUBSCRIBE",
            Packet::UnsubAck { .. } => "UNSUBACK",
            Packet::PingReq => "PINGREQ",
            Packet::PingResp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

pub fn encode_varint(mut len: usize, out: &mut Vec<u8>) -> Result<(), CodecError> {
    if len > MAX_REMAINING_LENGTH {
        return Err(CodecError::LengthTooLarge(len));
    }
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            return Ok(());
        }
    }
}

/// `Ok(None)` when more bytes are needed; otherwise the value and the
/// number of bytes it occupied.
pub fn decode_varint(buf: &[u8]) -> Result<Option<(usize, usize)>, CodecError> {
    let mut value = 0usize;
    for i in 0..4 {
        let Some(&b) = buf.get(i) else { return Ok(None) };
        value += ((b & 0x7F) as usize) << (7 * i);
        if b & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
    }
    Err(CodecError::LengthOverflow)
}

/// Parses just the fixed header: `(header_len, remaining_len)`.
pub fn peek_header(buf: &[u8]) -> Result<Option<(usize, usize)>, CodecError> {
    if buf.is_empty() {
        return Ok(None);
    }
    Ok(decode_varint(&buf[1..])?.map(|(len, n)| (1 + n, len)))
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<(), CodecError> {
    let n = u16::try_from(b.len()).map_err(|_| CodecError::Protocol(format!("field of {} bytes exceeds 65535", b.len())))?;
    put_u16(out, n);
    out.extend_from_slice(b);
    Ok(())
}

fn check_pid(pid: u16) -> Result<u16, CodecError> {
    if pid == 0 {
        return Err(CodecError::Protocol("packet identifier 0".into()));
    }
    Ok(pid)
}

pub fn encode(p: &Packet) -> Result<Vec<u8>, CodecError> {
    let mut body = Vec::new();
    let header: u8 = match p {
        Packet::Connect(c) => {
            put_bytes(&mut body, PROTOCOL_NAME.as_bytes())?;
            body.push(PROTOCOL_LEVEL);
            let mut flags = 0u8;
            if c.clean_session {
                flags |= 0x02;
            }
            if let Some(w) = &c.will {
                flags |= 0x04 | ((w.qos as u8) << 3);
                if w.retain {
                    flags |= 0x20;
                }
            }
            if c.password.is_some() {
                if c.username.is_none() {
                    return Err(CodecError::Protocol("password without username".into()));
                }
                flags |= 0x40;
            }
            if c.username.is_some() {
                flags |= 0x80;
            }
            body.push(flags);
            put_u16(&mut body, c.keep_alive);
            put_bytes(&mut body, c.client_id.as_bytes())?;
            if let Some(w) = &c.will {
                put_bytes(&mut body, w.topic.as_bytes())?;
                put_bytes(&mut body, &w.payload)?;
            }
            if let Some(u) = &c.username {
                put_bytes(&mut body, u.as_bytes())?;
            }
            if let Some(pw) = &c.password {
                put_bytes(&mut body, pw)?;
            }
            0x10
        }
        Packet::ConnAck { session_present, code } => {
            body.push(*session_present as u8);
            body.push(*code as u8);
            0x20
        }
        Packet::Publish(pb) => {
            put_bytes(&mut body, pb.topic.as_bytes())?;
            match (pb.qos, pb.pid) {
                (QoS::AtMostOnce, None) => {}
                (QoS::AtLeastOnce, Some(pid)) => put_u16(&mut body, check_pid(pid)?),
                _ => return Err(CodecError::Protocol("packet identifier must be present iff QoS > 0".into())),
            }
            if pb.dup && pb.qos == QoS::AtMostOnce {
                return Err(CodecError::Protocol("DUP set on QoS 0 publish".into()));
            }
            body.extend_from_slice(&pb.payload);
            0x30 | ((pb.dup as u8) << 3) | ((pb.qos as u8) << 1) | pb.retain as u8
        }
        Packet::PubAck { pid } => {
            put_u16(&mut body, check_pid(*pid)?);
            0x40
        }
        Packet::Subscribe { pid, filters } => {
            if filters.is_empty() {
                return Err(CodecError::Protocol("SUBSCRIBE without filters".into()));
            }
            put_u16(&mut body, check_pid(*pid)?);
            for (f, q) in filters {
                put_bytes(&mut body, f.as_bytes())?;
                body.push(*q as u8);
            }
            0x82
        }
        Packet::SubAck { pid, codes } => {
            put_u16(&mut body, check_pid(*pid)?);
            for &c in codes {
                if !matches!(c, 0 | 1 | SUBACK_FAILURE) {
                    return Err(CodecError::Protocol(format!("SUBACK code {c}")));
                }
            }
            body.extend_from_slice(codes);
            0x90
        }
        Packet::Unsubscribe { pid, filters } => {
            if filters.is_empty() {
                return Err(CodecError::Protocol("UNSUBSCRIBE without filters".into()));
            }
            put_u16(&mut body, check_pid(*pid)?);
            for f in filters {
                put_bytes(&mut body, f.as_bytes())?;
            }
            0xA2
        }
        Packet::UnsubAck { pid } => {
            put_u16(&mut body, check_pid(*pid)?);
            0xB0
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(header);
    encode_varint(body.len(), &mut out)?;
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self.buf.get(self.pos).ok_or(CodecError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u16()? as usize;
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CodecError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let s = std::str::from_utf8(self.bytes()?).map_err(|_| CodecError::Utf8)?;
        if s.contains('\0') {
            return Err(CodecError::Protocol("NUL in string".into()));
        }
        Ok(s.to_string())
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

fn expect_flags(kind: u8, flags: u8, want: u8) -> Result<(), CodecError> {
    if flags != want {
        return Err(CodecError::FixedHeader(format!("packet type {kind} with flags {flags:#06b}")));
    }
    Ok(())
}

/// Decodes one packet from the front of `buf`. `Ok(None)` means the packet
/// is incomplete. Never looks past the declared remaining length.
pub fn decode(buf: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
    let Some((hlen, rlen)) = peek_header(buf)? else { return Ok(None) };
    let total = hlen + rlen;
    if buf.len() < total {
        return Ok(None);
    }
    let first = buf[0];
    let (kind, flags) = (first >> 4, first & 0x0F);
    let mut r = Reader { buf: &buf[hlen..total], pos: 0 };
    let p = match kind {
        1 => {
            expect_flags(kind, flags, 0)?;
            let name = r.string()?;
            let level = r.u8()?;
            if name != PROTOCOL_NAME || level != PROTOCOL_LEVEL {
                return Err(CodecError::Protocol(format!("unsupported protocol {name:?} level {level}")));
            }
            let cf = r.u8()?;
            if cf & 0x01 != 0 {
                return Err(CodecError::Protocol("reserved CONNECT flag set".into()));
            }
            let has_will = cf & 0x04 != 0;
            let will_qos = (cf >> 3) & 0x03;
            let will_retain = cf & 0x20 != 0;
            if !has_will && (will_qos != 0 || will_retain) {
                return Err(CodecError::Protocol("will QoS/retain without will flag".into()));
            }
            let (has_pw, has_user) = (cf & 0x40 != 0, cf & 0x80 != 0);
            if has_pw && !has_user {
                return Err(CodecError::Protocol("password without username".into()));
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            let will = if has_will {
                Some(Will { topic: r.string()?, payload: r.bytes()?.to_vec(), qos: QoS::from_u8(will_qos)?, retain: will_retain })
            } else {
                None
            };
            let username = if has_user { Some(r.string()?) } else { None };
            let password = if has_pw { Some(r.bytes()?.to_vec()) } else { None };
            Packet::Connect(Connect { client_id, clean_session: cf & 0x02 != 0, keep_alive, will, username, password })
        }
        2 => {
            expect_flags(kind, flags, 0)?;
            let ack = r.u8()?;
            if ack & 0xFE != 0 {
                return Err(CodecError::Protocol("reserved CONNACK flags".into()));
            }
            Packet::ConnAck { session_present: ack == 1, code: ConnectReturn::from_u8(r.u8()?)? }
        }
        3 => {
            let qos = QoS::from_u8((flags >> 1) & 0x03)?;
            let dup = flags & 0x08 != 0;
            if dup && qos == QoS::AtMostOnce {
                return Err(CodecError::Protocol("DUP set on QoS 0 publish".into()));
            }
            let topic = r.string()?;
            let pid = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(check_pid(r.u16()?)?),
            };
            Packet::Publish(Publish { dup, qos, retain: flags & 0x01 != 0, topic, pid, payload: r.rest().to_vec() })
        }
        4 => {
            expect_flags(kind, flags, 0)?;
            Packet::PubAck { pid: check_pid(r.u16()?)? }
        }
        8 => {
            expect_flags(kind, flags, 0b0010)?;
            let pid = check_pid(r.u16()?)?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let f = r.string()?;
                let q = r.u8()?;
                if q & 0xFC != 0 {
                    return Err(CodecError::Protocol("reserved bits in requested QoS".into()));
                }
                filters.push((f, QoS::from_u8(q)?));
            }
            if filters.is_empty() {
                return Err(CodecError::Protocol("SUBSCRIBE without filters".into()));
            }
            Packet::Subscribe { pid, filters }
        }
        9 => {
            expect_flags(kind, flags, 0)?;
            let pid = check_pid(r.u16()?)?;
            let codes = r.rest().to_vec();
            if let Some(c) = codes.iter().find(|&&c| !matches!(c, 0 | 1 | SUBACK_FAILURE)) {
                return Err(CodecError::Protocol(format!("SUBACK code {c}")));
            }
            Packet::SubAck { pid, codes }
        }
        10 => {
            expect_flags(kind, flags, 0b0010)?;
            let pid = check_pid(r.u16()?)?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                filters.push(r.string()?);
            }
            if filters.is_empty() {
                return Err(CodecError::Protocol("UNSUBSCRIBE without filters".into()));
            }
            Packet::Unsubscribe { pid, filters }
        }
        11 => {
            expect_flags(kind, flags, 0)?;
            Packet::UnsubAck { pid: check_pid(r.u16()?)? }
        }
        12..=14 => {
            expect_flags(kind, flags, 0)?;
            match kind {
                12 => Packet::PingReq,
                13 => Packet::PingResp,
                _ => Packet::Disconnect,
            }
        }
        0 | 15 => return Err(CodecError::FixedHeader(format!("reserved packet type {kind}"))),
        other => return Err(CodecError::UnsupportedType(other)),
    };
    r.finish()?;
    Ok(Some((p, total)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_examples() {
        let enc = |n| {
            let mut v = Vec::new();
            encode_varint(n, &mut v).unwrap();
            v
        };
        assert_eq!(enc(0), [0x00]);
        assert_eq!(enc(321), [0xC1, 0x02]);
        assert_eq!(enc(127), [0x7F]);
        assert_eq!(enc(128), [0x80, 0x01]);
        assert_eq!(enc(MAX_REMAINING_LENGTH), [0xFF, 0xFF, 0xFF, 0x7F]);
        assert!(encode_varint(MAX_REMAINING_LENGTH + 1, &mut Vec::new()).is_err());
        assert_eq!(decode_varint(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]), Err(CodecError::LengthOverflow));
        assert_eq!(decode_varint(&[0x80, 0x80]), Ok(None));
    }

    #[test]
    fn fixed_packets() {
        assert_eq!(encode(&Packet::PingReq).unwrap(), [0xC0, 0x00]);
        assert_eq!(encode(&Packet::PingResp).unwrap(), [0xD0, 0x00]);
        assert_eq!(encode(&Packet::Disconnect).unwrap(), [0xE0, 0x00]);
        assert_eq!(decode(&[0xC0, 0x00, 0xFF]).unwrap(), Some((Packet::PingReq, 2)));
    }

    #[test]
    fn connect_bytes() {
        let mut c = Connect::new("n1");
        c.keep_alive = 60;
        let bytes = encode(&Packet::Connect(c.clone())).unwrap();
        assert_eq!(bytes, [0x10, 14, 0, 4, b'M', b'Q', b'T', b'T', 4, 0x02, 0, 60, 0, 2, b'n', b'1']);
        assert_eq!(decode(&bytes).unwrap(), Some((Packet::Connect(c), 16)));
    }

    #[test]
    fn incremental_decode() {
        let p = Packet::Publish(Publish { pid: Some(7), ..Publish::new("farm/n1/cmd", b"{}".to_vec(), QoS::AtLeastOnce, false) });
        let bytes = encode(&p).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(decode(&bytes[..cut]).unwrap(), None, "cut {cut}");
        }
        assert_eq!(decode(&bytes).unwrap(), Some((p, bytes.len())));
    }

    #[test]
    fn rejects_violations() {
        // SUBSCRIBE with wrong flags
        assert!(decode(&[0x80, 0x02, 0x00, 0x01]).is_err());
        // QoS 2 publish
        assert!(decode(&[0x34, 0x05, 0x00, 0x01, b'a', 0x00, 0x01]).is_err());
        // reserved type
        assert!(decode(&[0xF0, 0x00]).is_err());
        // PUBREC is outside the subset
        assert_eq!(decode(&[0x50, 0x02, 0x00, 0x01]), Err(CodecError::UnsupportedType(5)));
        // trailing byte in PUBACK
        assert_eq!(decode(&[0x40, 0x03, 0x00, 0x01, 0x00]), Err(CodecError::Trailing(1)));
        // packet id zero
        assert!(decode(&[0x40, 0x02, 0x00, 0x00]).is_err());
        // bad utf-8 topic
        assert_eq!(decode(&[0x30, 0x03, 0x00, 0x01, 0xFF]), Err(CodecError::Utf8));
        // string length runs past the remaining length even though the buffer continues
        assert_eq!(decode(&[0x30, 0x03, 0x00, 0x05, b'a', b'b', b'c', b'd', b'e']), Err(CodecError::Truncated));
    }
}
