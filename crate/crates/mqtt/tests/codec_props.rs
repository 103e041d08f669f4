use irrigo_mqtt::codec::{
    decode, decode_varint, encode, encode_varint, CodecError, Connect, ConnectReturn, Packet, Publish, QoS, Will, MAX_REMAINING_LENGTH,
    SUBACK_FAILURE,
};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9/+#_ éü-]{0,24}"
}

fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
}

fn pid() -> impl Strategy<Value = u16> {
    1u16..=u16::MAX
}

fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..max)
}

fn will() -> impl Strategy<Value = Will> {
    (text(), bytes(32), qos(), any::<bool>()).prop_map(|(topic, payload, qos, retain)| Will { topic, payload, qos, retain })
}

fn connect() -> impl Strategy<Value = Packet> {
    (text(), any::<bool>(), any::<u16>(), prop::option::of(will()), prop::option::of((text(), prop::option::of(bytes(16))))).prop_map(
        |(client_id, clean_session, keep_alive, will, creds)| {
            let (username, password) = match creds {
                Some((u, p)) => (Some(u), p),
                None => (None, None),
            };
            Packet::Connect(Connect { client_id, clean_session, keep_alive, will, username, password })
        },
    )
}

fn publish() -> impl Strategy<Value = Packet> {
    (text(), bytes(300), qos(), any::<bool>(), any::<bool>(), pid()).prop_map(|(topic, payload, qos, retain, dup, id)| {
        let (pid, dup) = match qos {
            QoS::AtMostOnce => (None, false),
            QoS::AtLeastOnce => (Some(id), dup),
        };
        Packet::Publish(Publish { dup, qos, retain, topic, pid, payload })
    })
}

fn packet() -> impl Strategy<Value = Packet> {
    let codes = prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(SUBACK_FAILURE)], 0..5);
    let code = prop_oneof![
        Just(ConnectReturn::Accepted),
        Just(ConnectReturn::BadProtocol),
        Just(ConnectReturn::IdentifierRejected),
        Just(ConnectReturn::ServerUnavailable),
        Just(ConnectReturn::BadCredentials),
        Just(ConnectReturn::NotAuthorized),
    ];
    prop_oneof![
        connect(),
        (any::<bool>(), code).prop_map(|(session_present, code)| Packet::ConnAck { session_present, code }),
        publish(),
        pid().prop_map(|pid| Packet::PubAck { pid }),
        (pid(), prop::collection::vec((text(), qos()), 1..5)).prop_map(|(pid, filters)| Packet::Subscribe { pid, filters }),
        (pid(), codes).prop_map(|(pid, codes)| Packet::SubAck { pid, codes }),
        (pid(), prop::collection::vec(text(), 1..5)).prop_map(|(pid, filters)| Packet::Unsubscribe { pid, filters }),
        pid().prop_map(|pid| Packet::UnsubAck { pid }),
        Just(Packet::PingReq),
        Just(Packet::PingResp),
        Just(Packet::Disconnect),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]
    #[test]
    fn round_trip(p in packet(), tail in bytes(8)) {
        let mut bytes = encode(&p).unwrap();
        let len = bytes.len();
        bytes.extend_from_slice(&tail);
        // decoding stops exactly at the declared length
        prop_assert_eq!(decode(&bytes).unwrap(), Some((p, len)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20_000))]
    #[test]
    fn varint_total(n in 0usize..=MAX_REMAINING_LENGTH) {
        let mut v = Vec::new();
        encode_varint(n, &mut v).unwrap();
        prop_assert!(v.len() <= 4);
        prop_assert_eq!(decode_varint(&v).unwrap(), Some((n, v.len())));
    }

    #[test]
    fn arbitrary_bytes_never_panic(b in bytes(64)) {
        if let Ok(Some((_, used))) = decode(&b) {
            prop_assert!(used <= b.len());
        }
    }
}

#[test]
fn varint_boundaries() {
    let cases: [(usize, &[u8]); 8] = [
        (0, &[0x00]),
        (127, &[0x7F]),
        (128, &[0x80, 0x01]),
        (16_383, &[0xFF, 0x7F]),
        (16_384, &[0x80, 0x80, 0x01]),
        (2_097_151, &[0xFF, 0xFF, 0x7F]),
        (2_097_152, &[0x80, 0x80, 0x80, 0x01]),
        (268_435_455, &[0xFF, 0xFF, 0xFF, 0x7F]),
    ];
    for (n, want) in cases {
        let mut v = Vec::new();
        encode_varint(n, &mut v).unwrap();
        assert_eq!(v, want, "{n}");
        assert_eq!(decode_varint(&v).unwrap(), Some((n, want.len())));
    }
    assert_eq!(decode_varint(&[0x80, 0x80, 0x80, 0x80, 0x01]), Err(CodecError::LengthOverflow));
}
