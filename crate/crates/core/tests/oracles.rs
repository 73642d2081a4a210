//! Fast implementations against brute-force references.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use qdbft_core::auth::{toeplitz_tag, Digest, TAG_BITS};
use qdbft_core::ledger::merkle_root;
use qdbft_core::qkd::KeyUnit;
use qdbft_core::ring::{select_primary, setup_table, ConfigTable, Placement};
use qdbft_core::NodeId;

fn random_table(rng: &mut ChaCha8Rng) -> ConfigTable {
    let n = rng.gen_range(1..=10);
    let z = rng.gen_range(1..=32);
    let mut ids: Vec<NodeId> = Vec::new();
    while ids.len() < n {
        let id = NodeId(rng.gen_range(1..1000));
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let placement = if rng.gen_bool(0.5) { Placement::Equidistant } else { Placement::Alg2Literal };
    setup_table(&ids, z, placement).unwrap()
}

/// Walks every point and keeps the one with the smallest clockwise
/// distance past the target.
fn scan_primary(table: &ConfigTable, parent: &Digest) -> NodeId {
    let b = parent.as_bytes();
    let target = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
    let mut best: Option<(u32, NodeId)> = None;
    for (p, owner) in table.points() {
        let dist = p.0.wrapping_sub(target).wrapping_sub(1);
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, owner));
        }
    }
    best.unwrap().1
}

#[test]
fn select_primary_matches_ring_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut table = random_table(&mut rng);
    for i in 0..10_000 {
        if i % 50 == 0 {
            table = random_table(&mut rng);
        }
        let mut d = [0u8; 32];
        rng.fill_bytes(&mut d);
        let parent = Digest(d);
        assert_eq!(select_primary(&table, &parent).unwrap(), scan_primary(&table, &parent), "case {i}");
    }
}

fn bit(bytes: &[u8], i: usize) -> bool {
    (bytes[i / 8] >> (7 - i % 8)) & 1 == 1
}

/// Materializes the 128x256 matrix and multiplies bit by bit.
fn naive_toeplitz(key: &[u8], digest: &[u8; 32]) -> [u8; 16] {
    let mut a = vec![[false; 256]; TAG_BITS];
    for (r, row) in a.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = bit(key, r + 255 - c);
        }
    }
    let mut out = [0u8; 16];
    for (r, row) in a.iter().enumerate() {
        let mut acc = false;
        for (c, cell) in row.iter().enumerate() {
            acc ^= *cell && bit(digest, c);
        }
        acc ^= bit(key, 383 + r);
        if acc {
            out[r / 8] |= 1 << (7 - r % 8);
        }
    }
    out
}

#[test]
fn toeplitz_matches_naive_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1_000 {
        let mut key = vec![0u8; 64];
        let mut d = [0u8; 32];
        rng.fill_bytes(&mut key);
        rng.fill_bytes(&mut d);
        let tag = toeplitz_tag(&KeyUnit::from_bytes(i, key.clone()), &Digest(d)).unwrap();
        assert_eq!(tag.bytes, naive_toeplitz(&key, &d), "case {i}");
    }
}

fn h(a: &[u8; 32], b: &[u8; 32]) -> [u8; 32] {
    let mut s = Sha256::new();
    s.update(a);
    s.update(b);
    s.finalize().into()
}

/// Node `i` at `level` above the leaves, recomputed from scratch.
fn node(leaves: &[[u8; 32]], level: u32, i: usize) -> [u8; 32] {
    if level == 0 {
        return leaves[i];
    }
    let below = width(leaves.len(), level - 1);
    let left = node(leaves, level - 1, 2 * i);
    let right = if 2 * i + 1 < below { node(leaves, level - 1, 2 * i + 1) } else { left };
    h(&left, &right)
}

fn width(n: usize, level: u32) -> usize {
    (0..level).fold(n, |w, _| w.div_ceil(2))
}

fn naive_root(leaves: &[[u8; 32]]) -> [u8; 32] {
    let mut top = 1;
    while width(leaves.len(), top) > 1 {
        top += 1;
    }
    node(leaves, top, 0)
}

#[test]
fn merkle_matches_naive_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=16 {
        let leaves: Vec<[u8; 32]> = (0..n)
            .map(|_| {
                let mut d = [0u8; 32];
                rng.fill_bytes(&mut d);
                d
            })
            .collect();
        let digests: Vec<Digest> = leaves.iter().map(|l| Digest(*l)).collect();
        assert_eq!(merkle_root(&digests).unwrap().0, naive_root(&leaves), "{n} leaves");
    }
}

#[test]
fn merkle_single_leaf_is_self_paired() {
    let l = [7u8; 32];
    assert_eq!(merkle_root(&[Digest(l)]).unwrap().0, h(&l, &l));
}
