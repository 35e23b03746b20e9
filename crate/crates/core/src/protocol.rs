//! Broadcast state machines.
//!
//! [`KademliaBroadcast`] runs the subtree broadcast over scored routing
//! tables. With neighbor evaluation enabled, the source picks relays per
//! bucket by rank weight, hands out one voting ticket to every other bucket
//! member, and neighbors of the source echo a small confirmation back when a
//! copy reaches them through a third party. Each accepted confirmation scores
//! both the echoing probe and the first-hop relay the copy travelled through.
//! With evaluation disabled, relays are drawn uniformly and nothing is echoed.
//!
//! [`Gossip`] is the unstructured baseline: forward every new message to a
//! fixed number of random neighbors other than the sender.
//!
//! All operations mutate only the given [`NodeState`] and return send intents;
//! delivery is the simulator's job.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::identity::{shared_prefix_len, NodeId};
use crate::routing::{probe_set, select_relays, select_uniform, Bucket, RoutingTable};

pub const DEFAULT_DATA_BYTES: u32 = 128;
pub const DEFAULT_CONFIRM_BYTES: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageHash(pub u64);

impl MessageHash {
    /// Digest of (source, round, payload size), truncated to 64 bits.
    pub fn compute(source: &NodeId, round: u64, payload_bytes: u32) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(source.width().to_be_bytes());
        hasher.update(source.as_bytes());
        hasher.update(round.to_be_bytes());
        hasher.update(payload_bytes.to_be_bytes());
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        MessageHash(u64::from_be_bytes(head))
    }
}

impl fmt::Display for MessageHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Opaque validity stamp carried by every message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stamp(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Data,
    Confirmation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastMessage {
    pub hash: MessageHash,
    pub size_bytes: u32,
    pub source: NodeId,
    /// First-hop relay chosen by the source; never rewritten downstream.
    pub relay: NodeId,
    /// Immediate sender, set on every hop.
    pub from: NodeId,
    pub stamp: Stamp,
    pub kind: MessageKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ticket {
    pub message_hash: MessageHash,
    pub probe_id: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    RefuseRelay,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub table: RoutingTable,
    pub known: HashSet<MessageHash>,
    pub tickets: HashSet<Ticket>,
    pub behavior: Behavior,
    pub online: bool,
}

impl NodeState {
    pub fn new(id: NodeId, table: RoutingTable) -> Self {
        NodeState {
            id,
            table,
            known: HashSet::new(),
            tickets: HashSet::new(),
            behavior: Behavior::Honest,
            online: true,
        }
    }

    /// Drops routing state, as after a crash.
    pub fn reset(&mut self) {
        self.table.clear();
        self.tickets.clear();
    }
}

pub trait StampVerifier: Send + Sync + fmt::Debug {
    fn stamp(&self, message: &BroadcastMessage) -> Stamp;
    fn verify(&self, message: &BroadcastMessage) -> bool;
}

/// Stamps every message with zero and accepts everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl StampVerifier for AcceptAll {
    fn stamp(&self, _message: &BroadcastMessage) -> Stamp {
        Stamp(0)
    }

    fn verify(&self, _message: &BroadcastMessage) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendIntent {
    pub to: NodeId,
    pub message: BroadcastMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreEvent {
    /// Peer delivered a message this node had not seen.
    NewMessage(NodeId),
    /// Probe echoed one of this node's own broadcasts back.
    ProbeVote(NodeId),
    /// First-hop relay whose copy reached a probe first.
    RelayVote(NodeId),
}

impl ScoreEvent {
    pub fn peer(&self) -> NodeId {
        match self {
            ScoreEvent::NewMessage(p) | ScoreEvent::ProbeVote(p) | ScoreEvent::RelayVote(p) => *p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceiveOutcome {
    InvalidStamp,
    /// Own broadcast echoed back; `accepted` tells whether a ticket was consumed.
    Vote {
        accepted: bool,
    },
    Duplicate,
    New,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reception {
    pub outcome: ReceiveOutcome,
    pub sends: Vec<SendIntent>,
    pub confirmation: Option<SendIntent>,
    pub scores: Vec<ScoreEvent>,
}

impl Reception {
    fn dropped(outcome: ReceiveOutcome) -> Self {
        Reception { outcome, sends: Vec::new(), confirmation: None, scores: Vec::new() }
    }

    pub fn is_new(&self) -> bool {
        self.outcome == ReceiveOutcome::New
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KademliaParams {
    pub beta: usize,
    pub ne_enabled: bool,
    /// Whether refuse-relay nodes still echo confirmations.
    pub refusers_confirm: bool,
    pub confirm_bytes: u32,
}

impl KademliaParams {
    pub fn new(beta: usize, ne_enabled: bool) -> Self {
        KademliaParams { beta, ne_enabled, refusers_confirm: true, confirm_bytes: DEFAULT_CONFIRM_BYTES }
    }
}

const SCORE_UNIT: u64 = 1;

#[derive(Debug, Clone)]
pub struct KademliaBroadcast {
    pub params: KademliaParams,
    verifier: Arc<dyn StampVerifier>,
}

impl KademliaBroadcast {
    pub fn new(params: KademliaParams) -> Self {
        Self::with_verifier(params, Arc::new(AcceptAll))
    }

    pub fn with_verifier(params: KademliaParams, verifier: Arc<dyn StampVerifier>) -> Self {
        KademliaBroadcast { params, verifier }
    }

    fn choose<R: Rng + ?Sized>(&self, bucket: &Bucket, rng: &mut R) -> Vec<NodeId> {
        if self.params.ne_enabled {
            select_relays(bucket, self.params.beta, rng)
        } else {
            select_uniform(bucket, self.params.beta, rng)
        }
    }

    /// Starts broadcast number `round` from `node`.
    pub fn initiate<R: Rng + ?Sized>(
        &self,
        node: &mut NodeState,
        round: u64,
        payload_bytes: u32,
        rng: &mut R,
    ) -> Vec<SendIntent> {
        self.initiate_with(node, round, payload_bytes, |_, bucket| self.choose(bucket, rng))
    }

    /// Like [`initiate`](Self::initiate) with a caller-provided relay choice per
    /// bucket `(bucket index, bucket) -> relays`. Buckets are visited in
    /// ascending index order.
    pub fn initiate_with<F>(
        &self,
        node: &mut NodeState,
        round: u64,
        payload_bytes: u32,
        mut select: F,
    ) -> Vec<SendIntent>
    where
        F: FnMut(usize, &Bucket) -> Vec<NodeId>,
    {
        let hash = MessageHash::compute(&node.id, round, payload_bytes);
        node.known.insert(hash);
        let mut sends = Vec::new();
        for (i, bucket) in node.table.buckets().iter().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            let relays = select(i, bucket);
            for peer in &relays {
                let mut message = BroadcastMessage {
                    hash,
                    size_bytes: payload_bytes,
                    source: node.id,
                    relay: *peer,
                    from: node.id,
                    stamp: Stamp(0),
                    kind: MessageKind::Data,
                };
                message.stamp = self.verifier.stamp(&message);
                sends.push(SendIntent { to: *peer, message });
            }
            if self.params.ne_enabled {
                for probe in probe_set(bucket, &relays) {
                    node.tickets.insert(Ticket { message_hash: hash, probe_id: probe });
                }
            }
        }
        sends
    }

    /// Processes one received message.
    pub fn handle<R: Rng + ?Sized>(
        &self,
        node: &mut NodeState,
        m: &BroadcastMessage,
        rng: &mut R,
    ) -> Reception {
        if !self.verifier.verify(m) {
            return Reception::dropped(ReceiveOutcome::InvalidStamp);
        }

        if node.id == m.source {
            let ticket = Ticket { message_hash: m.hash, probe_id: m.from };
            if !node.tickets.remove(&ticket) {
                return Reception::dropped(ReceiveOutcome::Vote { accepted: false });
            }
            node.table.add_score(&m.from, SCORE_UNIT);
            node.table.add_score(&m.relay, SCORE_UNIT);
            let mut r = Reception::dropped(ReceiveOutcome::Vote { accepted: true });
            r.scores = vec![ScoreEvent::ProbeVote(m.from), ScoreEvent::RelayVote(m.relay)];
            // the source always knows its own hash, so nothing further happens
            debug_assert!(node.known.contains(&m.hash));
            return r;
        }

        if node.known.contains(&m.hash) {
            return Reception::dropped(ReceiveOutcome::Duplicate);
        }

        node.table.add_score(&m.from, SCORE_UNIT);
        node.known.insert(m.hash);
        let mut reception = Reception {
            outcome: ReceiveOutcome::New,
            sends: Vec::new(),
            confirmation: None,
            scores: vec![ScoreEvent::NewMessage(m.from)],
        };

        let refusing = node.behavior == Behavior::RefuseRelay;
        if self.params.ne_enabled
            && m.from != m.source
            && node.table.is_neighbor(&m.source)
            && (!refusing || self.params.refusers_confirm)
        {
            let mut echo = m.clone();
            echo.from = node.id;
            echo.size_bytes = self.params.confirm_bytes;
            echo.kind = MessageKind::Confirmation;
            echo.stamp = self.verifier.stamp(&echo);
            reception.confirmation = Some(SendIntent { to: m.source, message: echo });
        }

        if refusing {
            return reception;
        }

        let height = shared_prefix_len(&node.id, &m.from).expect("ids share a width") as usize + 1;
        let buckets = node.table.buckets();
        for bucket in buckets.iter().skip(height) {
            if bucket.is_empty() {
                continue;
            }
            for peer in self.choose(bucket, rng) {
                let mut message = m.clone();
                message.from = node.id;
                message.kind = MessageKind::Data;
                message.stamp = self.verifier.stamp(&message);
                reception.sends.push(SendIntent { to: peer, message });
            }
        }
        reception
    }

    /// Feeds echoed copies to the source in arrival order and sums the score
    /// changes per peer.
    pub fn vote_outcome<R: Rng + ?Sized>(
        &self,
        source: &mut NodeState,
        confirmations: &[BroadcastMessage],
        rng: &mut R,
    ) -> BTreeMap<NodeId, u64> {
        let mut deltas = BTreeMap::new();
        for m in confirmations {
            for event in self.handle(source, m, rng).scores {
                *deltas.entry(event.peer()).or_insert(0) += SCORE_UNIT;
            }
        }
        deltas
    }
}

/// Unstructured gossip over the routing-table neighbor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gossip {
    pub fanout: usize,
}

impl Gossip {
    fn forward<R: Rng + ?Sized>(
        &self,
        table: &RoutingTable,
        exclude: Option<NodeId>,
        base: &BroadcastMessage,
        self_id: NodeId,
        rng: &mut R,
    ) -> Vec<SendIntent> {
        let candidates: Vec<NodeId> = table.peers().map(|e| e.id).filter(|id| Some(*id) != exclude).collect();
        let picked: Vec<NodeId> = if self.fanout >= candidates.len() {
            candidates
        } else {
            index::sample(rng, candidates.len(), self.fanout).into_iter().map(|i| candidates[i]).collect()
        };
        picked
            .into_iter()
            .map(|to| {
                let mut message = base.clone();
                message.from = self_id;
                SendIntent { to, message }
            })
            .collect()
    }

    pub fn initiate<R: Rng + ?Sized>(
        &self,
        node: &mut NodeState,
        round: u64,
        payload_bytes: u32,
        rng: &mut R,
    ) -> Vec<SendIntent> {
        let hash = MessageHash::compute(&node.id, round, payload_bytes);
        node.known.insert(hash);
        let base = BroadcastMessage {
            hash,
            size_bytes: payload_bytes,
            source: node.id,
            relay: node.id,
            from: node.id,
            stamp: Stamp(0),
            kind: MessageKind::Data,
        };
        self.forward(&node.table, None, &base, node.id, rng)
    }

    pub fn handle<R: Rng + ?Sized>(
        &self,
        node: &mut NodeState,
        m: &BroadcastMessage,
        rng: &mut R,
    ) -> Reception {
        if !node.known.insert(m.hash) {
            return Reception::dropped(ReceiveOutcome::Duplicate);
        }
        let sends = if node.behavior == Behavior::RefuseRelay {
            Vec::new()
        } else {
            self.forward(&node.table, Some(m.from), m, node.id, rng)
        };
        Reception { outcome: ReceiveOutcome::New, sends, confirmation: None, scores: Vec::new() }
    }
}
