use proptest::prelude::*;

use qdbft_core::auth::{toeplitz_tag, Digest, KeyRegistry, SignerId, Tag, TagMode};
use qdbft_core::consensus::messages::{Auth, Body, CommitMsg, TransmitMsg};
use qdbft_core::consensus::Envelope;
use qdbft_core::ledger::{Block, Proposal, Request};
use qdbft_core::qkd::KeyUnit;
use qdbft_core::ring::{apply_membership_change, select_primary, setup_table, MembershipChange, Placement};
use qdbft_core::wire::Wire;
use qdbft_core::{ClientId, NodeId};

fn digest() -> impl Strategy<Value = Digest> {
    any::<[u8; 32]>().prop_map(Digest)
}

fn xor(a: &[u8; 16], b: &[u8; 16]) -> [u8; 16] {
    std::array::from_fn(|i| a[i] ^ b[i])
}

fn request(op: Vec<u8>, ts: u64, client: u64) -> Request {
    let mut reg = KeyRegistry::new(1);
    reg.register(SignerId::Client(ClientId(client)));
    let payload = Request::signing_payload(&op, ts, ClientId(client));
    let signature = reg.sign(SignerId::Client(ClientId(client)), &payload).unwrap();
    Request { operation: op, timestamp_ms: ts, client: ClientId(client), signature }
}

proptest! {
    #[test]
    fn toeplitz_matrix_part_is_linear(key in proptest::collection::vec(any::<u8>(), 64), a in digest(), b in digest()) {
        let unit = KeyUnit::from_bytes(0, key);
        let pad = toeplitz_tag(&unit, &Digest([0; 32])).unwrap().bytes;
        let ab = Digest(std::array::from_fn(|i| a.0[i] ^ b.0[i]));
        let ta = xor(&toeplitz_tag(&unit, &a).unwrap().bytes, &pad);
        let tb = xor(&toeplitz_tag(&unit, &b).unwrap().bytes, &pad);
        let tab = xor(&toeplitz_tag(&unit, &ab).unwrap().bytes, &pad);
        prop_assert_eq!(tab, xor(&ta, &tb));
    }

    #[test]
    fn transmit_envelopes_round_trip(
        sender in 1u64..50, version in 0u64..10, height in 0u64..1000,
        table in digest(), new_digest in digest(), batch in digest(), block in digest(),
        decisions in proptest::collection::vec(any::<bool>(), 0..20),
        tags in proptest::collection::btree_map(1u64..50, (any::<[u8; 16]>(), any::<u64>(), any::<bool>()), 0..10),
    ) {
        let body = Body::Transmit(TransmitMsg { height, table, new_digest, batch_digest: batch, decisions, block_digest: block });
        let tags = tags
            .into_iter()
            .map(|(id, (bytes, key_serial, hmac))| {
                let mode = if hmac { TagMode::Hmac } else { TagMode::ToeplitzIts };
                (NodeId(id), Tag { bytes, mode, key_serial })
            })
            .collect();
        let auth = Auth::Bundle(qdbft_core::auth::AuthBundle { sender: NodeId(sender), digest: table, tags });
        let env = Envelope::new(NodeId(sender), version, body, auth);
        let bytes = env.to_bytes();
        let back = Envelope::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &env);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn commit_with_block_round_trips(
        height in 1u64..100, parent in digest(), t in any::<u64>(), table in digest(),
        ops in proptest::collection::vec((proptest::collection::vec(any::<u8>(), 0..32), any::<bool>()), 0..6),
    ) {
        let requests: Vec<Request> = ops.iter().enumerate().map(|(i, (op, _))| request(op.clone(), i as u64, 1)).collect();
        let proposals: Vec<Proposal> = requests.iter().zip(&ops).map(|(r, (_, ok))| Proposal { request: r.digest(), approved: *ok }).collect();
        let block = Block::new(height, parent, t, proposals, requests, NodeId(2), 3);
        prop_assert!(block.body_consistent());
        let m = CommitMsg {
            height, table, parent_hash: parent, commit_time_ms: t,
            merkle_root: block.header.merkle_root, block_digest: block.digest(), block: Some(block),
        };
        let env = Envelope::new(NodeId(2), 3, Body::Commit(m), Auth::None);
        prop_assert_eq!(Envelope::from_bytes(&env.to_bytes()).unwrap(), env);
    }

    #[test]
    fn truncated_envelopes_are_rejected(cut in 1usize..60, height in 0u64..10, d in digest()) {
        let body = Body::Transmit(TransmitMsg { height, table: d, new_digest: d, batch_digest: d, decisions: vec![true], block_digest: d });
        let bytes = Envelope::new(NodeId(1), 0, body, Auth::None).to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(Envelope::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn primary_is_always_a_member(n in 1u64..12, z in 1u32..20, parent in digest(), literal in any::<bool>()) {
        let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        let placement = if literal { Placement::Alg2Literal } else { Placement::Equidistant };
        let table = setup_table(&ids, z, placement).unwrap();
        prop_assert!(table.contains(select_primary(&table, &parent).unwrap()));
        prop_assert_eq!(table.points().count(), (n as usize) * z as usize);
    }

    #[test]
    fn join_then_exit_bumps_version_twice(n in 2u64..10, z in 1u32..16) {
        let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        let t0 = setup_table(&ids, z, Placement::Equidistant).unwrap();
        let t1 = apply_membership_change(&t0, MembershipChange::Join(NodeId(100))).unwrap();
        let t2 = apply_membership_change(&t1, MembershipChange::Exit(NodeId(100))).unwrap();
        prop_assert_eq!(t1.version(), 1);
        prop_assert_eq!(t2.version(), 2);
        prop_assert_eq!(t2.members(), t0.members());
        prop_assert_eq!(qdbft_core::ring::ConfigTable::from_bytes(&t2.canonical_bytes()).unwrap(), t2);
    }
}
