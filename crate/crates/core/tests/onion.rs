use mixfed_core::onion::*;
use mixfed_core::NodeId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn keyring(n: usize, rng: &mut ChaCha20Rng) -> Vec<NodeKeyPair> {
    (0..n)
        .map(|i| NodeKeyPair::generate(NodeId(0x5150_0000 + i as u32), rng))
        .collect()
}

fn hops_of(keys: &[&NodeKeyPair]) -> Vec<Hop> {
    keys.iter()
        .map(|k| Hop {
            node: k.node_id(),
            public: k.public(),
        })
        .collect()
}

/// Peels along `path` and returns the final result plus every intermediate
/// packet seen on the wire.
fn walk(format: &PacketFormat, packet: OnionPacket, path: &[&NodeKeyPair]) -> (PeelResult, Vec<OnionPacket>) {
    let mut seen = vec![packet.clone()];
    let mut current = packet;
    for (i, key) in path.iter().enumerate() {
        match format.peel(&current, key) {
            PeelResult::Forward { next_hop, packet } => {
                assert!(i + 1 < path.len(), "forwarded past the last hop");
                assert_eq!(next_hop, path[i + 1].node_id());
                assert_eq!(packet.len(), PACKET_LEN);
                seen.push(packet.clone());
                current = packet;
            }
            other => {
                assert_eq!(i + 1, path.len(), "stopped early at hop {i}: {other:?}");
                return (other, seen);
            }
        }
    }
    unreachable!("path exhausted without delivery")
}

#[test]
fn two_hop_round_trip() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let f = PacketFormat::new(2).unwrap();
    let ks = keyring(2, &mut rng);
    let path = [&ks[0], &ks[1]];
    let p = InnerPayload::new(PayloadKind::Fragment, b"two hops".to_vec());
    let pkt = f.build_packet(&p, &hops_of(&path), &mut rng).unwrap();
    let PeelResult::Forward { next_hop, packet } = f.peel(&pkt, &ks[0]) else {
        panic!("relay must forward")
    };
    assert_eq!(next_hop, ks[1].node_id());
    assert_eq!(f.peel(&packet, &ks[1]), PeelResult::Deliver(p));
}

#[test]
fn exhaustive_small_paths_every_k_max() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let ks = keyring(5, &mut rng);
    for k_max in 1..=3 {
        let f = PacketFormat::new(k_max).unwrap();
        for len in 1..=f.max_hops() {
            let path: Vec<&NodeKeyPair> = ks.iter().take(len).collect();
            for body_len in [0, 1, 100, f.capacity() - 4] {
                let body: Vec<u8> = (0..body_len).map(|_| rng.gen()).collect();
                let p = InnerPayload::new(PayloadKind::Fragment, body);
                let pkt = f.build_packet(&p, &hops_of(&path), &mut rng).unwrap();
                let (last, seen) = walk(&f, pkt, &path);
                assert_eq!(last, PeelResult::Deliver(p));
                assert_eq!(seen.len(), len);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_paths_round_trip(
        seed in any::<u64>(),
        k_max in 1usize..=3,
        len_pick in 0usize..8,
        body in proptest::collection::vec(any::<u8>(), 0..700),
        with_surb in any::<bool>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let f = PacketFormat::new(k_max).unwrap();
        let ks = keyring(f.max_hops() + 1, &mut rng);
        let len = 1 + len_pick % f.max_hops();
        let mut path: Vec<&NodeKeyPair> = ks.iter().collect();
        path.truncate(len);
        let mut p = InnerPayload::new(PayloadKind::Fragment, body);
        if with_surb {
            let back = [&ks[ks.len() - 1]];
            let (surb, _) = f.build_surb(&hops_of(&back), &mut rng).unwrap();
            p = p.with_surb(surb);
        }
        match f.build_packet(&p, &hops_of(&path), &mut rng) {
            Ok(pkt) => {
                prop_assert_eq!(pkt.len(), PACKET_LEN);
                let (last, _) = walk(&f, pkt, &path);
                prop_assert_eq!(last, PeelResult::Deliver(p));
            }
            Err(OnionError::PayloadTooLarge { len, capacity }) => prop_assert!(len > capacity),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}

#[test]
fn every_single_bit_flip_is_rejected() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let f = PacketFormat::new(2).unwrap();
    let ks = keyring(1, &mut rng);
    let p = InnerPayload::new(PayloadKind::Ack, b"tamper".to_vec());
    let pkt = f.build_packet(&p, &hops_of(&[&ks[0]]), &mut rng).unwrap();
    let bytes = pkt.as_bytes();
    for byte in 0..PACKET_LEN {
        for bit in 0..8 {
            let mut t = bytes.to_vec();
            t[byte] ^= 1 << bit;
            let t = OnionPacket::from_vec(t).unwrap();
            assert_eq!(f.peel(&t, &ks[0]), PeelResult::Invalid, "byte {byte} bit {bit}");
        }
    }
}

#[test]
fn header_flips_rejected_at_first_relay_payload_flips_at_recipient() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let f = PacketFormat::new(2).unwrap();
    let ks = keyring(3, &mut rng);
    let path = [&ks[0], &ks[1], &ks[2]];
    let p = InnerPayload::new(PayloadKind::Fragment, vec![7; 512]);
    let pkt = f.build_packet(&p, &hops_of(&path), &mut rng).unwrap();
    let payload_start = 1 + f.header_len() + MAC_LEN;
    for byte in (0..PACKET_LEN).step_by(7) {
        let mut t = pkt.as_bytes().to_vec();
        t[byte] ^= 0x10;
        let t = OnionPacket::from_vec(t).unwrap();
        if byte < payload_start {
            assert_eq!(f.peel(&t, &ks[0]), PeelResult::Invalid, "header byte {byte}");
        } else {
            let mut cur = t;
            let mut result = PeelResult::Invalid;
            for k in path {
                result = f.peel(&cur, k);
                match &result {
                    PeelResult::Forward { packet, .. } => cur = packet.clone(),
                    _ => break,
                }
            }
            assert_eq!(result, PeelResult::Invalid, "payload byte {byte}");
        }
    }
}

#[test]
fn later_hops_never_appear_in_visible_headers() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let f = PacketFormat::new(3).unwrap();
    for _ in 0..50 {
        let ks = keyring(4, &mut rng);
        let path: Vec<&NodeKeyPair> = ks.iter().collect();
        let p = InnerPayload::new(PayloadKind::Cover, Vec::new());
        let pkt = f.build_packet(&p, &hops_of(&path), &mut rng).unwrap();
        let (_, seen) = walk(&f, pkt, &path);
        for (i, wire) in seen.iter().enumerate() {
            let header = &wire.as_bytes()[..1 + f.header_len() + MAC_LEN];
            for later in &path[i + 1..] {
                let needle = later.node_id().to_bytes();
                assert!(
                    !header.windows(4).any(|w| w == needle),
                    "hop {i} header leaks {:?}",
                    later.node_id()
                );
            }
        }
    }
}

#[test]
fn surb_two_hop_reply_reaches_originator() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let f = PacketFormat::new(2).unwrap();
    let ks = keyring(3, &mut rng);
    let (originator, relay, replier) = (&ks[0], &ks[1], &ks[2]);
    let (surb, material) = f.build_surb(&hops_of(&[relay, originator]), &mut rng).unwrap();
    assert_eq!(surb.first_hop, relay.node_id());
    let mut table = SurbTable::default();
    table.insert(material);

    let request = InnerPayload::new(PayloadKind::Fragment, b"frag".to_vec()).with_surb(surb);
    let pkt = f.build_packet(&request, &hops_of(&[replier]), &mut rng).unwrap();
    let PeelResult::Deliver(inner) = f.peel(&pkt, replier) else {
        panic!("recipient must deliver")
    };
    let mut replier_state = SurbReplier::default();
    let surb = inner.surb.expect("attached reply block");
    let (first, reply) = replier_state.apply(&f, &surb, b"ACK:frag", &mut rng).unwrap();
    assert_eq!(first, relay.node_id());
    assert_eq!(reply.len(), PACKET_LEN);
    assert_eq!(
        replier_state.apply(&f, &surb, b"again", &mut rng),
        Err(OnionError::SurbAlreadyUsed)
    );

    let PeelResult::Forward { next_hop, packet } = f.peel(&reply, relay) else {
        panic!("relay must forward the reply")
    };
    assert_eq!(next_hop, originator.node_id());
    let PeelResult::SurbReply { surb_id, body } = f.peel(&packet, originator) else {
        panic!("originator must recognise its reply block")
    };
    assert_eq!(table.unwrap(&f, &surb_id, &body).unwrap(), b"ACK:frag");
    assert_eq!(table.unwrap(&f, &surb_id, &body), Err(OnionError::UnknownSurbId));
}

#[test]
fn reply_blocks_are_independent() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let f = PacketFormat::new(2).unwrap();
    let ks = keyring(2, &mut rng);
    let path = hops_of(&[&ks[1], &ks[0]]);
    let (a, _) = f.build_surb(&path, &mut rng).unwrap();
    let (b, _) = f.build_surb(&path, &mut rng).unwrap();
    assert_ne!(a.surb_id, b.surb_id);
    assert_ne!(a.encode(), b.encode());
    assert_eq!(a.encode().len(), f.surb_len());
    assert_eq!(Surb::decode(&a.encode(), &f).unwrap(), a);
}

#[test]
fn reply_packets_look_like_forward_packets() {
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let f = PacketFormat::new(2).unwrap();
    let ks = keyring(2, &mut rng);
    let (surb, _) = f.build_surb(&hops_of(&[&ks[1], &ks[0]]), &mut rng).unwrap();
    let (_, reply) = f.apply_surb(&surb, b"ack", &mut rng).unwrap();
    let fwd = f
        .build_packet(
            &InnerPayload::new(PayloadKind::Fragment, vec![1; 512]),
            &hops_of(&[&ks[1], &ks[0]]),
            &mut rng,
        )
        .unwrap();
    assert_eq!(reply.len(), fwd.len());
    assert_eq!(reply.as_bytes()[0], fwd.as_bytes()[0]);
}
