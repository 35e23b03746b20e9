//! Scored routing tables.
//!
//! Each bucket keeps its peers ordered by score (highest first, older entries
//! first on ties). Rank positions map onto weight tiers: rank `i` belongs to
//! group `floor(log2(i + 1))` and a bucket of capacity `2^R - 1` has `R`
//! groups, group `g` carrying weight `2^(R - 1 - g)`. With every group full,
//! each group's total weight is `2^(R - 1)`, so the first draw picks each
//! group with equal probability.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{bucket_index_of, NodeId};

pub const DEFAULT_BUCKET_CAPACITY: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("bucket capacity must be 2^n - 1, got {0}")]
    InvalidCapacity(usize),
    #[error("rank {rank} out of range for capacity {capacity}")]
    RankOutOfRange { rank: usize, capacity: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerEntry {
    pub id: NodeId,
    pub score: u64,
    pub inserted_at: u64,
}

impl PeerEntry {
    /// True if `self` ranks strictly after `other`.
    fn ranks_after(&self, other: &PeerEntry) -> bool {
        self.score < other.score || (self.score == other.score && self.inserted_at > other.inserted_at)
    }
}

pub fn is_valid_capacity(capacity: usize) -> bool {
    capacity >= 1 && (capacity + 1).is_power_of_two()
}

/// Weight of the peer at `rank` in a bucket of `capacity`.
pub fn weight_of_rank(rank: usize, capacity: usize) -> Result<u64, RoutingError> {
    if !is_valid_capacity(capacity) {
        return Err(RoutingError::InvalidCapacity(capacity));
    }
    if rank >= capacity {
        return Err(RoutingError::RankOutOfRange { rank, capacity });
    }
    let groups = (capacity + 1).trailing_zeros();
    let group = (rank + 1).ilog2();
    Ok(1u64 << (groups - 1 - group))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    capacity: usize,
    entries: Vec<PeerEntry>,
}

impl Bucket {
    pub fn new(capacity: usize) -> Result<Self, RoutingError> {
        if !is_valid_capacity(capacity) {
            return Err(RoutingError::InvalidCapacity(capacity));
        }
        Ok(Bucket { capacity, entries: Vec::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PeerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn position(&self, peer: &NodeId) -> Option<usize> {
        self.entries.iter().position(|e| e.id == *peer)
    }

    pub fn contains(&self, peer: &NodeId) -> bool {
        self.position(peer).is_some()
    }

    pub fn get(&self, peer: &NodeId) -> Option<&PeerEntry> {
        self.entries.iter().find(|e| e.id == *peer)
    }

    fn place(&mut self, entry: PeerEntry) {
        let at = self.entries.iter().position(|e| e.ranks_after(&entry)).unwrap_or(self.entries.len());
        self.entries.insert(at, entry);
    }

    /// Inserts `peer` with score 0; a full bucket or a known peer is left unchanged.
    pub fn insert(&mut self, peer: NodeId, now: u64) -> bool {
        if self.is_full() || self.contains(&peer) {
            return false;
        }
        self.place(PeerEntry { id: peer, score: 0, inserted_at: now });
        true
    }

    pub fn remove(&mut self, peer: &NodeId) -> bool {
        match self.position(peer) {
            Some(at) => {
                self.entries.remove(at);
                true
            }
            None => false,
        }
    }

    /// Adds `amount` to the peer's score and restores the ordering. Returns the
    /// new score, or 0 when the peer is not in the bucket.
    pub fn add_score(&mut self, peer: &NodeId, amount: u64) -> u64 {
        let Some(at) = self.position(peer) else {
            return 0;
        };
        let mut entry = self.entries.remove(at);
        entry.score = entry.score.saturating_add(amount);
        let score = entry.score;
        self.place(entry);
        score
    }

    /// Rank weights of the occupied positions.
    pub fn weights(&self) -> Vec<u64> {
        (0..self.entries.len())
            .map(|rank| weight_of_rank(rank, self.capacity).expect("rank below capacity"))
            .collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Weighted sampling without replacement: each draw picks an unselected peer
/// with probability proportional to its rank weight.
pub fn select_relays<R: Rng + ?Sized>(bucket: &Bucket, beta: usize, rng: &mut R) -> Vec<NodeId> {
    let n = bucket.len();
    if beta >= n {
        return bucket.ids().collect();
    }
    let mut weights = bucket.weights();
    let mut remaining: u64 = weights.iter().sum();
    let mut picked = Vec::with_capacity(beta);
    for _ in 0..beta {
        let mut ticket = rng.gen_range(0..remaining);
        let mut chosen = n;
        for (rank, w) in weights.iter().enumerate() {
            if ticket < *w {
                chosen = rank;
                break;
            }
            ticket -= *w;
        }
        debug_assert!(chosen < n);
        remaining -= weights[chosen];
        weights[chosen] = 0;
        picked.push(bucket.entries[chosen].id);
    }
    picked
}

/// Uniform sampling without replacement, used when neighbor evaluation is off.
pub fn select_uniform<R: Rng + ?Sized>(bucket: &Bucket, beta: usize, rng: &mut R) -> Vec<NodeId> {
    let n = bucket.len();
    if beta >= n {
        return bucket.ids().collect();
    }
    index::sample(rng, n, beta).into_iter().map(|rank| bucket.entries[rank].id).collect()
}

/// Bucket members that were not chosen as relays, in rank order.
pub fn probe_set(bucket: &Bucket, relays: &[NodeId]) -> Vec<NodeId> {
    bucket.ids().filter(|id| !relays.contains(id)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    owner: NodeId,
    buckets: Vec<Bucket>,
}

impl RoutingTable {
    pub fn new(owner: NodeId, capacity: usize) -> Result<Self, RoutingError> {
        let bucket = Bucket::new(capacity)?;
        Ok(RoutingTable { owner, buckets: vec![bucket; owner.width() as usize] })
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn bucket(&self, index: usize) -> &Bucket {
        &self.buckets[index]
    }

    fn index_for(&self, peer: &NodeId) -> Option<usize> {
        bucket_index_of(&self.owner, peer).ok()
    }

    pub fn insert_peer(&mut self, peer: NodeId, now: u64) -> bool {
        match self.index_for(&peer) {
            Some(i) => self.buckets[i].insert(peer, now),
            None => false,
        }
    }

    pub fn remove_peer(&mut self, peer: &NodeId) -> bool {
        match self.index_for(peer) {
            Some(i) => self.buckets[i].remove(peer),
            None => false,
        }
    }

    pub fn add_score(&mut self, peer: &NodeId, amount: u64) -> u64 {
        match self.index_for(peer) {
            Some(i) => self.buckets[i].add_score(peer, amount),
            None => 0,
        }
    }

    pub fn is_neighbor(&self, peer: &NodeId) -> bool {
        self.index_for(peer).is_some_and(|i| self.buckets[i].contains(peer))
    }

    pub fn score_of(&self, peer: &NodeId) -> Option<u64> {
        let i = self.index_for(peer)?;
        self.buckets[i].get(peer).map(|e| e.score)
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerEntry> + '_ {
        self.buckets.iter().flat_map(|b| b.entries.iter())
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Bucket::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Bucket::is_empty)
    }

    pub fn clear(&mut self) {
        self.buckets.iter_mut().for_each(Bucket::clear);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn id(v: u128) -> NodeId {
        NodeId::from_u128(v, 8).unwrap()
    }

    fn bucket_of(capacity: usize, ids: &[u128]) -> Bucket {
        let mut b = Bucket::new(capacity).unwrap();
        for (t, v) in ids.iter().enumerate() {
            assert!(b.insert(id(*v), t as u64));
        }
        b
    }

    #[test]
    fn weights_follow_group_tiers() {
        let w7: Vec<u64> = (0..7).map(|r| weight_of_rank(r, 7).unwrap()).collect();
        assert_eq!(w7, vec![4, 2, 2, 1, 1, 1, 1]);
        assert_eq!(weight_of_rank(0, 15).unwrap(), 8);
        assert_eq!(weight_of_rank(14, 15).unwrap(), 1);
        assert_eq!(weight_of_rank(0, 1).unwrap(), 1);
        assert_eq!(weight_of_rank(7, 7), Err(RoutingError::RankOutOfRange { rank: 7, capacity: 7 }));
        assert_eq!(weight_of_rank(0, 6), Err(RoutingError::InvalidCapacity(6)));
    }

    #[test]
    fn capacity_fifteen_groups_enumerated() {
        // groups by hand: {0}, {1,2}, {3..=6}, {7..=14}
        let groups: [&[usize]; 4] = [&[0], &[1, 2], &[3, 4, 5, 6], &[7, 8, 9, 10, 11, 12, 13, 14]];
        for (g, ranks) in groups.iter().enumerate() {
            for r in *ranks {
                assert_eq!(weight_of_rank(*r, 15).unwrap(), 8 >> g);
            }
            let sum: u64 = ranks.iter().map(|r| weight_of_rank(*r, 15).unwrap()).sum();
            assert_eq!(sum, 8, "every full group carries the same total weight");
        }
    }

    #[test]
    fn insert_and_remove() {
        let owner = id(0);
        let mut table = RoutingTable::new(owner, 15).unwrap();
        assert!(table.insert_peer(id(0x80), 0));
        assert_eq!(table.bucket(0).len(), 1);
        assert_eq!(table.score_of(&id(0x80)), Some(0));
        assert!(!table.insert_peer(id(0x80), 1));
        assert!(!table.insert_peer(owner, 0));

        table.add_score(&id(0x80), 4);
        assert!(table.remove_peer(&id(0x80)));
        assert!(!table.is_neighbor(&id(0x80)));
        assert!(!table.remove_peer(&id(0x80)));
        assert!(table.insert_peer(id(0x80), 5));
        assert_eq!(table.score_of(&id(0x80)), Some(0), "score is lost on removal");
    }

    #[test]
    fn full_bucket_rejects() {
        let mut table = RoutingTable::new(id(0), 15).unwrap();
        for v in 0x80..0x80 + 15 {
            assert!(table.insert_peer(id(v), 0));
        }
        assert!(!table.insert_peer(id(0xf0), 1));
        assert_eq!(table.bucket(0).len(), 15);
    }

    #[test]
    fn add_score_reorders() {
        let mut b = bucket_of(7, &[1, 2]);
        b.add_score(&id(1), 3);
        b.add_score(&id(2), 5);
        assert_eq!(b.ids().collect::<Vec<_>>(), vec![id(2), id(1)]);
        assert_eq!(b.add_score(&id(1), 3), 6);
        assert_eq!(b.ids().collect::<Vec<_>>(), vec![id(1), id(2)]);
        assert_eq!(b.add_score(&id(9), 1), 0);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn equal_scores_prefer_older_entries() {
        let mut b = Bucket::new(7).unwrap();
        b.insert(id(5), 10);
        b.insert(id(6), 3);
        assert_eq!(b.ids().collect::<Vec<_>>(), vec![id(6), id(5)]);
        b.add_score(&id(5), 1);
        b.add_score(&id(6), 1);
        assert_eq!(b.ids().collect::<Vec<_>>(), vec![id(6), id(5)]);
    }

    #[test]
    fn select_returns_everyone_when_beta_covers_bucket() {
        let b = bucket_of(7, &[1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_relays(&b, 3, &mut rng), vec![id(1), id(2), id(3)]);
        assert_eq!(select_relays(&b, 9, &mut rng).len(), 3);
        assert_eq!(select_uniform(&b, 5, &mut rng).len(), 3);
        assert!(select_relays(&Bucket::new(7).unwrap(), 2, &mut rng).is_empty());
    }

    #[test]
    fn probe_set_examples() {
        let b = bucket_of(7, &[1, 2, 3]);
        assert_eq!(probe_set(&b, &[id(1)]), vec![id(2), id(3)]);
        assert!(probe_set(&b, &[id(1), id(2), id(3)]).is_empty());
    }

    #[test]
    fn weighted_first_draw_matches_rank_weights() {
        let b = bucket_of(7, &[10, 11, 12, 13, 14, 15, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 100_000;
        let mut counts = [0usize; 7];
        for _ in 0..trials {
            let first = select_relays(&b, 1, &mut rng)[0];
            counts[b.position(&first).unwrap()] += 1;
        }
        let expected = [4.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0].map(|w| w / 12.0);
        for (c, p) in counts.iter().zip(expected) {
            assert!((*c as f64 / trials as f64 - p).abs() < 0.01);
        }
    }

    proptest! {
        #[test]
        fn ordering_invariant_holds(ops in prop::collection::vec((0u128..20, 1u64..4, any::<bool>()), 1..200)) {
            let mut b = Bucket::new(15).unwrap();
            for (t, (v, amount, insert)) in ops.iter().enumerate() {
                if *insert {
                    b.insert(id(*v), t as u64 / 3);
                } else {
                    b.add_score(&id(*v), *amount);
                }
                prop_assert!(b.len() <= b.capacity());
                for pair in b.entries().windows(2) {
                    prop_assert!(!pair[0].ranks_after(&pair[1]));
                }
                let mut ids: Vec<_> = b.ids().collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), b.len());
            }
        }

        #[test]
        fn selection_is_distinct_subset(n in 0usize..15, beta in 1usize..6, seed in any::<u64>()) {
            let ids: Vec<u128> = (0..n as u128).collect();
            let b = bucket_of(15, &ids);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for picked in [select_relays(&b, beta, &mut rng), select_uniform(&b, beta, &mut rng)] {
                prop_assert_eq!(picked.len(), beta.min(n));
                let mut sorted = picked.clone();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), picked.len());
                prop_assert!(picked.iter().all(|p| b.contains(p)));
                let probes = probe_set(&b, &picked);
                prop_assert_eq!(probes.len() + picked.len(), b.len());
                prop_assert!(probes.iter().all(|p| !picked.contains(p)));
            }
        }
    }
}
