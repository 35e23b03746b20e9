//! Discrete-event network simulator.
//!
//! Events are popped from a min-heap in `(time, seq)` order. Each node has a
//! single upstream link: outgoing packets serialize behind one another at the
//! node's upstream rate, then take the fixed inter-region propagation delay.
//! Receive bandwidth is unlimited. All times are integer microseconds.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{assign_ids, IdentityError, NodeId};
use crate::metrics::{MessageRec, MetricsError, RecordEvent};
use crate::protocol::{
    Behavior, BroadcastMessage, Gossip, KademliaBroadcast, MessageHash, MessageKind, NodeState,
    ReceiveOutcome, Reception, SendIntent, DEFAULT_CONFIRM_BYTES, DEFAULT_DATA_BYTES,
};
use crate::routing::{is_valid_capacity, RoutingError, RoutingTable, DEFAULT_BUCKET_CAPACITY};

pub const MICROS_PER_SECOND: u64 = 1_000_000;

/// Upstream rates (bps) and their share of nodes, in percent.
pub const DEFAULT_BANDWIDTHS: [(u64, u32); 4] = [(512_000, 10), (256_000, 60), (128_000, 20), (64_000, 10)];
/// Share of nodes per region a..d, in percent.
pub const DEFAULT_REGION_SHARES: [u32; 4] = [30, 10, 40, 20];
/// One-way delay between regions a..d in microseconds.
pub const DEFAULT_DELAYS_US: [[u64; 4]; 4] = [
    [10_000, 200_000, 250_000, 250_000],
    [200_000, 3_000, 100_000, 100_000],
    [250_000, 100_000, 7_000, 200_000],
    [250_000, 100_000, 200_000, 8_000],
];

// independent random streams derived from one seed
const STREAM_TOPOLOGY: u64 = 0;
const STREAM_PROFILES: u64 = 1;
const STREAM_CHURN: u64 = 2;
const STREAM_PROTOCOL: u64 = 3;
const STREAM_ADVERSARY: u64 = 4;
const BOOTSTRAP_ATTEMPTS: u64 = 16;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid network config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("could not bootstrap a connected overlay after {0} attempts")]
    Disconnected(u64),
}

fn config_err(field: &'static str, reason: impl Into<String>) -> SimError {
    SimError::Config { field, reason: reason.into() }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    A,
    B,
    C,
    D,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::A, Region::B, Region::C, Region::D];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub n_nodes: usize,
    pub id_bits: u32,
    pub bucket_capacity: usize,
    /// Percent of nodes per region a..d.
    pub region_percent: [u32; 4],
    /// Upstream classes as `[bps, percent]`.
    pub bandwidth_classes: Vec<[u64; 2]>,
    pub delay_us: [[u64; 4]; 4],
    pub data_msg_bytes: u32,
    pub confirm_msg_bytes: u32,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_nodes: 200,
            id_bits: 16,
            bucket_capacity: DEFAULT_BUCKET_CAPACITY,
            region_percent: DEFAULT_REGION_SHARES,
            bandwidth_classes: DEFAULT_BANDWIDTHS.iter().map(|(b, p)| [*b, *p as u64]).collect(),
            delay_us: DEFAULT_DELAYS_US,
            data_msg_bytes: DEFAULT_DATA_BYTES,
            confirm_msg_bytes: DEFAULT_CONFIRM_BYTES,
            seed: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_nodes == 0 {
            return Err(config_err("n_nodes", "must be at least 1"));
        }
        if self.id_bits == 0 || self.id_bits > crate::identity::MAX_ID_BITS {
            return Err(config_err("id_bits", "must be in 1..=160"));
        }
        if self.id_bits < 64 && self.n_nodes as u128 > 1u128 << self.id_bits {
            return Err(config_err("id_bits", "too few bits for n_nodes distinct ids"));
        }
        if !is_valid_capacity(self.bucket_capacity) {
            return Err(config_err("bucket_capacity", "must be 2^n - 1"));
        }
        if self.region_percent.iter().sum::<u32>() != 100 {
            return Err(config_err("region_percent", "must sum to 100"));
        }
        if self.bandwidth_classes.is_empty()
            || self.bandwidth_classes.iter().map(|c| c[1]).sum::<u64>() != 100
        {
            return Err(config_err("bandwidth_classes", "percentages must sum to 100"));
        }
        if self.bandwidth_classes.iter().any(|c| c[0] == 0) {
            return Err(config_err("bandwidth_classes", "bandwidth must be positive"));
        }
        for a in 0..4 {
            for b in 0..4 {
                if self.delay_us[a][b] != self.delay_us[b][a] {
                    return Err(config_err("delay_us", "delay matrix must be symmetric"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeNetProfile {
    pub region: Region,
    pub upstream_bps: u64,
    /// Time at which the outgoing link becomes idle.
    pub busy_until: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub start: u64,
    pub end: u64,
    pub arrival: u64,
}

/// Microseconds needed to push `size_bytes` through a `bps` link, rounded up.
pub fn serialization_delay_us(size_bytes: u32, bps: u64) -> u64 {
    (size_bytes as u64 * 8 * MICROS_PER_SECOND).div_ceil(bps)
}

/// Queues one packet on the sender's upstream link.
pub fn transmission_schedule(
    sender: &mut NodeNetProfile,
    size_bytes: u32,
    now: u64,
    receiver: Region,
    delay_us: &[[u64; 4]; 4],
) -> Transmission {
    let start = now.max(sender.busy_until);
    let end = start + serialization_delay_us(size_bytes, sender.upstream_bps);
    sender.busy_until = end;
    Transmission { start, end, arrival: end + delay_us[sender.region.index()][receiver.index()] }
}

/// Draws region and upstream class independently per node.
pub fn assign_profiles<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Vec<NodeNetProfile> {
    let regions = WeightedIndex::new(config.region_percent).expect("validated shares");
    let classes =
        WeightedIndex::new(config.bandwidth_classes.iter().map(|c| c[1])).expect("validated shares");
    (0..config.n_nodes)
        .map(|_| NodeNetProfile {
            region: Region::ALL[regions.sample(rng)],
            upstream_bps: config.bandwidth_classes[classes.sample(rng)][0],
            busy_until: 0,
        })
        .collect()
}

/// Offers every other node, in shuffled order, to each node's table.
pub fn bootstrap_topology<R: Rng + ?Sized>(
    ids: &[NodeId],
    capacity: usize,
    rng: &mut R,
) -> Result<Vec<RoutingTable>, RoutingError> {
    let mut tables = Vec::with_capacity(ids.len());
    let mut order: Vec<usize> = (0..ids.len()).collect();
    for (i, id) in ids.iter().enumerate() {
        let mut table = RoutingTable::new(*id, capacity)?;
        order.shuffle(rng);
        for j in &order {
            if *j != i {
                table.insert_peer(ids[*j], 0);
            }
        }
        tables.push(table);
    }
    Ok(tables)
}

/// Strong connectivity of the directed "knows" graph.
pub fn is_strongly_connected(tables: &[RoutingTable], index: &HashMap<NodeId, usize>) -> bool {
    let n = tables.len();
    if n <= 1 {
        return true;
    }
    let forward: Vec<Vec<usize>> = tables.iter().map(|t| t.peers().map(|e| index[&e.id]).collect()).collect();
    let mut backward = vec![Vec::new(); n];
    for (i, outs) in forward.iter().enumerate() {
        for j in outs {
            backward[*j].push(i);
        }
    }
    let reaches_all = |adj: &Vec<Vec<usize>>| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for v in &adj[u] {
                if !seen[*v] {
                    seen[*v] = true;
                    count += 1;
                    queue.push_back(*v);
                }
            }
        }
        count == n
    };
    reaches_all(&forward) && reaches_all(&backward)
}

/// Offline flags for one churn disturbance: node `s` (1-based) fails with
/// probability `s / n`.
pub fn churn_offline_flags<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<bool> {
    (1..=n).map(|s| rng.gen_range(0..n) < s).collect()
}

/// A uniformly random half (rounded down) of the node indices, ascending.
pub fn pick_refusers<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut picked = index::sample(rng, n, n / 2).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    #[default]
    None,
    ChurnOnce,
    ChurnPeriodic,
    RefuseHalf,
}

#[derive(Debug, Clone)]
pub enum Dissemination {
    Kademlia(KademliaBroadcast),
    Gossip(Gossip),
}

impl Dissemination {
    fn initiate<R: Rng + ?Sized>(
        &self,
        node: &mut NodeState,
        round: u64,
        bytes: u32,
        rng: &mut R,
    ) -> Vec<SendIntent> {
        match self {
            Dissemination::Kademlia(k) => k.initiate(node, round, bytes, rng),
            Dissemination::Gossip(g) => g.initiate(node, round, bytes, rng),
        }
    }

    fn handle<R: Rng + ?Sized>(&self, node: &mut NodeState, m: &BroadcastMessage, rng: &mut R) -> Reception {
        match self {
            Dissemination::Kademlia(k) => k.handle(node, m, rng),
            Dissemination::Gossip(g) => g.handle(node, m, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub record_log: bool,
    pub horizon_us: Option<u64>,
    pub churn_period_us: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { record_log: false, horizon_us: None, churn_period_us: 60 * MICROS_PER_SECOND }
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    Initiate { seq: usize, node: usize },
    Deliver { to: usize, from: usize, message: BroadcastMessage, sent_at: u64, tx_end: u64 },
    Disturb,
    NodeOnline(usize),
    NodeOffline(usize),
}

#[derive(Debug, Clone)]
struct SimEvent {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ReceiverOffline,
    SenderOffline,
}

/// One line of the event log. Node fields are simulation indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogRecord {
    Initiate {
        time: u64,
        broadcast: usize,
        node: Option<usize>,
    },
    Send {
        time: u64,
        from: usize,
        to: usize,
        broadcast: usize,
        kind: MessageKind,
        arrival: u64,
    },
    SendFailed {
        time: u64,
        from: usize,
        to: usize,
        broadcast: usize,
    },
    Deliver {
        time: u64,
        from: usize,
        to: usize,
        broadcast: usize,
        kind: MessageKind,
        outcome: ReceiveOutcome,
    },
    Dropped {
        time: u64,
        from: usize,
        to: usize,
        broadcast: usize,
        reason: DropReason,
    },
    Disturb {
        time: u64,
    },
    Offline {
        time: u64,
        node: usize,
    },
    Online {
        time: u64,
        node: usize,
    },
}

pub const EVENT_LOG_HEADER: &str = "time_us,event,node,peer,broadcast,kind,detail";

fn kind_str(kind: MessageKind) -> &'static str {
    match kind {
        MessageKind::Data => "data",
        MessageKind::Confirmation => "confirmation",
    }
}

fn outcome_str(outcome: ReceiveOutcome) -> &'static str {
    match outcome {
        ReceiveOutcome::InvalidStamp => "invalid_stamp",
        ReceiveOutcome::Vote { accepted: true } => "vote_accepted",
        ReceiveOutcome::Vote { accepted: false } => "vote_rejected",
        ReceiveOutcome::Duplicate => "duplicate",
        ReceiveOutcome::New => "new",
    }
}

impl LogRecord {
    pub fn time(&self) -> u64 {
        match self {
            LogRecord::Initiate { time, .. }
            | LogRecord::Send { time, .. }
            | LogRecord::SendFailed { time, .. }
            | LogRecord::Deliver { time, .. }
            | LogRecord::Dropped { time, .. }
            | LogRecord::Disturb { time }
            | LogRecord::Offline { time, .. }
            | LogRecord::Online { time, .. } => *time,
        }
    }

    /// Row matching [`EVENT_LOG_HEADER`].
    pub fn csv_row(&self) -> String {
        let opt = |n: Option<usize>| n.map(|v| v.to_string()).unwrap_or_default();
        match self {
            LogRecord::Initiate { time, broadcast, node } => {
                format!("{time},initiate,{},,{broadcast},,", opt(*node))
            }
            LogRecord::Send { time, from, to, broadcast, kind, arrival } => {
                format!("{time},send,{from},{to},{broadcast},{},{arrival}", kind_str(*kind))
            }
            LogRecord::SendFailed { time, from, to, broadcast } => {
                format!("{time},send_failed,{from},{to},{broadcast},,")
            }
            LogRecord::Deliver { time, from, to, broadcast, kind, outcome } => format!(
                "{time},deliver,{to},{from},{broadcast},{},{}",
                kind_str(*kind),
                outcome_str(*outcome)
            ),
            LogRecord::Dropped { time, from, to, broadcast, reason } => {
                let reason = match reason {
                    DropReason::ReceiverOffline => "receiver_offline",
                    DropReason::SenderOffline => "sender_offline",
                };
                format!("{time},dropped,{to},{from},{broadcast},,{reason}")
            }
            LogRecord::Disturb { time } => format!("{time},disturb,,,,,"),
            LogRecord::Offline { time, node } => format!("{time},offline,{node},,,,"),
            LogRecord::Online { time, node } => format!("{time},online,{node},,,,"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionCounts {
    pub data: u64,
    pub confirmation: u64,
    pub data_bytes: u64,
    pub confirmation_bytes: u64,
    pub failed_sends: u64,
}

impl TransmissionCounts {
    fn add(&mut self, kind: MessageKind, bytes: u32) {
        match kind {
            MessageKind::Data => {
                self.data += 1;
                self.data_bytes += bytes as u64;
            }
            MessageKind::Confirmation => {
                self.confirmation += 1;
                self.confirmation_bytes += bytes as u64;
            }
        }
    }

    pub fn merge(&mut self, other: &TransmissionCounts) {
        self.data += other.data;
        self.confirmation += other.confirmation;
        self.data_bytes += other.data_bytes;
        self.confirmation_bytes += other.confirmation_bytes;
        self.failed_sends += other.failed_sends;
    }
}

/// Everything tracked for one broadcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastRecord {
    pub seq: usize,
    /// `None` when no node was online to start it.
    pub initiator: Option<usize>,
    pub hash: Option<MessageHash>,
    pub rec: MessageRec,
    pub online_at_start: usize,
    pub honest_online_at_start: usize,
    pub received_honest: usize,
    pub transmissions: TransmissionCounts,
}

impl BroadcastRecord {
    pub fn received(&self) -> usize {
        self.rec.received_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub truncated: bool,
    pub events_processed: u64,
    pub end_time: u64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    config: NetworkConfig,
    options: SimOptions,
    dissemination: Dissemination,
    nodes: Vec<NodeState>,
    profiles: Vec<NodeNetProfile>,
    index: HashMap<NodeId, usize>,
    offline_times: Vec<Vec<u64>>,
    queue: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
    now: u64,
    churn_rng: ChaCha8Rng,
    protocol_rng: ChaCha8Rng,
    records: Vec<BroadcastRecord>,
    scheduled: usize,
    by_hash: HashMap<MessageHash, usize>,
    counts: TransmissionCounts,
    log: Vec<LogRecord>,
}

impl Simulation {
    /// Assigns ids and network profiles and bootstraps routing tables. Tables
    /// depend only on `config`, so variants built from the same config share
    /// one topology.
    pub fn new(
        config: &NetworkConfig,
        dissemination: Dissemination,
        options: SimOptions,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let n = config.n_nodes;
        let mut attempt = 0;
        let (ids, tables, index) = loop {
            if attempt == BOOTSTRAP_ATTEMPTS {
                return Err(SimError::Disconnected(attempt));
            }
            let mut rng = stream_rng(config.seed.wrapping_add(attempt), STREAM_TOPOLOGY);
            let ids = assign_ids(n, config.id_bits, &mut rng)?;
            let tables = bootstrap_topology(&ids, config.bucket_capacity, &mut rng)?;
            let index: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
            if is_strongly_connected(&tables, &index) {
                break (ids, tables, index);
            }
            attempt += 1;
        };
        let profiles = assign_profiles(config, &mut stream_rng(config.seed, STREAM_PROFILES));
        let nodes = ids.iter().zip(tables).map(|(id, t)| NodeState::new(*id, t)).collect();
        Ok(Simulation {
            config: config.clone(),
            options,
            dissemination,
            nodes,
            profiles,
            index,
            offline_times: vec![Vec::new(); n],
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            churn_rng: stream_rng(config.seed, STREAM_CHURN),
            protocol_rng: stream_rng(config.seed, STREAM_PROTOCOL),
            records: Vec::new(),
            scheduled: 0,
            by_hash: HashMap::new(),
            counts: TransmissionCounts::default(),
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [NodeState] {
        &mut self.nodes
    }

    pub fn profiles(&self) -> &[NodeNetProfile] {
        &self.profiles
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Broadcast records in initiation order.
    pub fn records(&self) -> &[BroadcastRecord] {
        &self.records
    }

    pub fn counts(&self) -> TransmissionCounts {
        self.counts
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(SimEvent { time, seq, kind }));
    }

    fn emit(&mut self, record: LogRecord) {
        if self.options.record_log {
            self.log.push(record);
        }
    }

    /// Schedules `count` broadcasts, one every `interval_us`, started by nodes
    /// in round-robin order.
    pub fn schedule_broadcasts(&mut self, count: usize, interval_us: u64, first_at: u64) {
        let n = self.nodes.len();
        for k in 0..count {
            let seq = self.scheduled;
            self.scheduled += 1;
            self.push(first_at + k as u64 * interval_us, EventKind::Initiate { seq, node: seq % n });
        }
    }

    /// Schedules one broadcast from a specific node.
    pub fn schedule_broadcast_from(&mut self, node: usize, at: u64) {
        let seq = self.scheduled;
        self.scheduled += 1;
        self.push(at, EventKind::Initiate { seq, node });
    }

    /// Sets up the disturbance policy. Churn modes schedule disturbances from
    /// time zero (and then every churn period up to `until_us` when periodic);
    /// `RefuseHalf` marks half the nodes as refusing immediately.
    pub fn apply_disturbance(&mut self, mode: DisturbanceMode, until_us: u64) {
        match mode {
            DisturbanceMode::None => {}
            DisturbanceMode::ChurnOnce => self.push(0, EventKind::Disturb),
            DisturbanceMode::ChurnPeriodic => {
                let period = self.options.churn_period_us.max(1);
                let mut t = 0;
                while t <= until_us {
                    self.push(t, EventKind::Disturb);
                    t += period;
                }
            }
            DisturbanceMode::RefuseHalf => {
                let mut rng = stream_rng(self.config.seed, STREAM_ADVERSARY);
                for i in pick_refusers(self.nodes.len(), &mut rng) {
                    self.nodes[i].behavior = Behavior::RefuseRelay;
                }
            }
        }
    }

    pub fn schedule_offline(&mut self, node: usize, at: u64) {
        self.push(at, EventKind::NodeOffline(node));
    }

    pub fn schedule_online(&mut self, node: usize, at: u64) {
        self.push(at, EventKind::NodeOnline(node));
    }

    /// Injects a message directly into the queue.
    pub fn inject(&mut self, from: usize, to: usize, message: BroadcastMessage, at: u64) {
        self.push(at, EventKind::Deliver { to, from, message, sent_at: at, tx_end: at });
    }

    pub fn run(&mut self) -> RunSummary {
        let mut processed = 0;
        let mut truncated = false;
        while let Some(Reverse(event)) = self.queue.pop() {
            if self.options.horizon_us.is_some_and(|h| event.time > h) {
                self.queue.push(Reverse(event));
                truncated = true;
                break;
            }
            debug_assert!(event.time >= self.now);
            self.now = event.time;
            processed += 1;
            match event.kind {
                EventKind::Initiate { seq, node } => self.on_initiate(seq, node),
                EventKind::Deliver { to, from, message, sent_at, tx_end } => {
                    self.on_deliver(to, from, message, sent_at, tx_end)
                }
                EventKind::Disturb => self.on_disturb(),
                EventKind::NodeOffline(i) => self.on_offline(i),
                EventKind::NodeOnline(i) => self.on_online(i),
            }
        }
        RunSummary { truncated, events_processed: processed, end_time: self.now }
    }

    fn on_initiate(&mut self, seq: usize, preferred: usize) {
        let n = self.nodes.len();
        let initiator = (0..n).map(|k| (preferred + k) % n).find(|i| self.nodes[*i].online);
        let online = self.nodes.iter().filter(|s| s.online).count();
        let honest = self.nodes.iter().filter(|s| s.online && s.behavior == Behavior::Honest).count();
        let mut record = BroadcastRecord {
            seq,
            initiator,
            hash: None,
            rec: MessageRec::new(n, online),
            online_at_start: online,
            honest_online_at_start: honest,
            received_honest: 0,
            transmissions: TransmissionCounts::default(),
        };
        record.rec.record(RecordEvent::Initiate { time: self.now }).expect("fresh record");
        self.emit(LogRecord::Initiate { time: self.now, broadcast: seq, node: initiator });
        let Some(src) = initiator else {
            self.records.push(record);
            return;
        };

        let bytes = self.config.data_msg_bytes;
        let intents =
            self.dissemination.initiate(&mut self.nodes[src], seq as u64, bytes, &mut self.protocol_rng);
        let hash = MessageHash::compute(&self.nodes[src].id, seq as u64, bytes);
        debug_assert!(self.nodes[src].known.contains(&hash));
        record.hash = Some(hash);
        record.rec.record(RecordEvent::Receipt { time: self.now, node: src }).expect("first receipt");
        if self.nodes[src].behavior == Behavior::Honest {
            record.received_honest += 1;
        }
        self.by_hash.insert(hash, self.records.len());
        self.records.push(record);
        for intent in intents {
            self.dispatch(src, intent);
        }
    }

    fn sender_interrupted(&self, from: usize, sent_at: u64, tx_end: u64) -> bool {
        self.offline_times[from].iter().any(|t| *t >= sent_at && *t < tx_end)
    }

    fn on_deliver(&mut self, to: usize, from: usize, message: BroadcastMessage, sent_at: u64, tx_end: u64) {
        let broadcast = self.by_hash.get(&message.hash).copied().unwrap_or(usize::MAX);
        if !self.nodes[to].online {
            self.emit(LogRecord::Dropped {
                time: self.now,
                from,
                to,
                broadcast,
                reason: DropReason::ReceiverOffline,
            });
            return;
        }
        if self.sender_interrupted(from, sent_at, tx_end) {
            self.emit(LogRecord::Dropped {
                time: self.now,
                from,
                to,
                broadcast,
                reason: DropReason::SenderOffline,
            });
            return;
        }

        let sender_id = self.nodes[from].id;
        if self.nodes[from].online && !self.nodes[to].table.is_neighbor(&sender_id) {
            self.nodes[to].table.insert_peer(sender_id, self.now);
        }

        let reception = self.dissemination.handle(&mut self.nodes[to], &message, &mut self.protocol_rng);
        if reception.is_new() {
            if let Some(record) = self.records.get_mut(broadcast) {
                record
                    .rec
                    .record(RecordEvent::Receipt { time: self.now, node: to })
                    .expect("each node counted once per broadcast");
                if self.nodes[to].behavior == Behavior::Honest {
                    record.received_honest += 1;
                }
            }
        }
        self.emit(LogRecord::Deliver {
            time: self.now,
            from,
            to,
            broadcast,
            kind: message.kind,
            outcome: reception.outcome,
        });
        if let Some(echo) = reception.confirmation {
            self.dispatch(to, echo);
        }
        for intent in reception.sends {
            self.dispatch(to, intent);
        }
    }

    fn dispatch(&mut self, sender: usize, intent: SendIntent) {
        let to = self.index[&intent.to];
        let broadcast = self.by_hash.get(&intent.message.hash).copied().unwrap_or(usize::MAX);
        if !self.nodes[to].online {
            self.nodes[sender].table.remove_peer(&intent.to);
            self.counts.failed_sends += 1;
            self.emit(LogRecord::SendFailed { time: self.now, from: sender, to, broadcast });
            return;
        }
        let region = self.profiles[to].region;
        let tx = transmission_schedule(
            &mut self.profiles[sender],
            intent.message.size_bytes,
            self.now,
            region,
            &self.config.delay_us,
        );
        let kind = intent.message.kind;
        let bytes = intent.message.size_bytes;
        self.counts.add(kind, bytes);
        if let Some(record) = self.records.get_mut(broadcast) {
            record.transmissions.add(kind, bytes);
        }
        self.emit(LogRecord::Send { time: self.now, from: sender, to, broadcast, kind, arrival: tx.arrival });
        let now = self.now;
        self.push(
            tx.arrival,
            EventKind::Deliver { to, from: sender, message: intent.message, sent_at: now, tx_end: tx.end },
        );
    }

    /// Redraws every node's status at once: failures first, then rejoins in
    /// index order.
    fn on_disturb(&mut self) {
        self.emit(LogRecord::Disturb { time: self.now });
        let flags = churn_offline_flags(self.nodes.len(), &mut self.churn_rng);
        let mut going_up = Vec::new();
        for (i, offline) in flags.into_iter().enumerate() {
            match (self.nodes[i].online, offline) {
                (true, true) => self.on_offline(i),
                (false, false) => going_up.push(i),
                _ => {}
            }
        }
        for i in going_up {
            self.on_online(i);
        }
    }

    fn on_offline(&mut self, i: usize) {
        if !self.nodes[i].online {
            return;
        }
        let node = &mut self.nodes[i];
        node.online = false;
        node.reset();
        self.profiles[i].busy_until = self.now;
        self.offline_times[i].push(self.now);
        self.emit(LogRecord::Offline { time: self.now, node: i });
    }

    /// Rejoins node `i`: it offers itself every online node in shuffled order,
    /// and each node it accepts accepts it back if there is room.
    fn on_online(&mut self, i: usize) {
        if self.nodes[i].online {
            return;
        }
        self.nodes[i].online = true;
        self.profiles[i].busy_until = self.now;
        let mut candidates: Vec<usize> =
            (0..self.nodes.len()).filter(|j| *j != i && self.nodes[*j].online).collect();
        candidates.shuffle(&mut self.churn_rng);
        let me = self.nodes[i].id;
        for j in candidates {
            let peer = self.nodes[j].id;
            if self.nodes[i].table.insert_peer(peer, self.now) {
                self.nodes[j].table.insert_peer(me, self.now);
            }
        }
        self.emit(LogRecord::Online { time: self.now, node: i });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::KademliaParams;

    fn kad(beta: usize, ne: bool) -> Dissemination {
        Dissemination::Kademlia(KademliaBroadcast::new(KademliaParams::new(beta, ne)))
    }

    fn cfg(n: usize, seed: u64) -> NetworkConfig {
        NetworkConfig { n_nodes: n, seed, ..NetworkConfig::default() }
    }

    fn profile(bps: u64) -> NodeNetProfile {
        NodeNetProfile { region: Region::A, upstream_bps: bps, busy_until: 0 }
    }

    #[test]
    fn serialization_at_table_rates() {
        let mut p = profile(512_000);
        let tx = transmission_schedule(&mut p, 128, 1_000, Region::A, &DEFAULT_DELAYS_US);
        assert_eq!(tx.end - tx.start, 2_000);
        assert_eq!(tx.arrival, 1_000 + 2_000 + 10_000);

        let mut p = profile(512_000);
        let tx = transmission_schedule(&mut p, 0, 500, Region::C, &DEFAULT_DELAYS_US);
        assert_eq!(tx.arrival, 500 + 250_000);

        let mut slow = NodeNetProfile { region: Region::D, upstream_bps: 64_000, busy_until: 0 };
        let first = transmission_schedule(&mut slow, 128, 0, Region::D, &DEFAULT_DELAYS_US);
        let second = transmission_schedule(&mut slow, 128, 0, Region::D, &DEFAULT_DELAYS_US);
        assert_eq!(first.end, 16_000);
        assert!(second.arrival >= first.end + 16_000);
        assert_eq!(second.start, first.end);
        assert_eq!(serialization_delay_us(20, 256_000), 625);
        assert_eq!(serialization_delay_us(1, 3), 2_666_667);
    }

    #[test]
    fn config_validation_names_field() {
        let bad = NetworkConfig { bucket_capacity: 10, ..NetworkConfig::default() };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("bucket_capacity"), "{err}");
        let mut asym = NetworkConfig::default();
        asym.delay_us[0][1] = 1;
        assert!(asym.validate().unwrap_err().to_string().contains("delay_us"));
        let tiny = NetworkConfig { n_nodes: 20, id_bits: 4, ..NetworkConfig::default() };
        assert!(tiny.validate().unwrap_err().to_string().contains("id_bits"));
    }

    #[test]
    fn two_nodes_know_each_other() {
        let sim = Simulation::new(&cfg(2, 3), kad(1, false), SimOptions::default()).unwrap();
        let [a, b] = sim.nodes() else { panic!() };
        assert_eq!(a.table.len(), 1);
        assert!(a.table.is_neighbor(&b.id));
        assert!(b.table.is_neighbor(&a.id));
    }

    #[test]
    fn bootstrap_fills_every_reachable_bucket() {
        for seed in 0..5 {
            let sim = Simulation::new(&cfg(1000, seed), kad(1, false), SimOptions::default()).unwrap();
            let ids: Vec<NodeId> = sim.nodes().iter().map(|s| s.id).collect();
            let mut good = 0;
            for node in sim.nodes() {
                let mut ok = true;
                for (b, bucket) in node.table.buckets().iter().enumerate() {
                    let exists = ids.iter().any(|p| {
                        *p != node.id && crate::identity::bucket_index_of(&node.id, p).unwrap() == b
                    });
                    if exists && bucket.is_empty() {
                        ok = false;
                    }
                }
                good += ok as usize;
            }
            assert!(good * 100 >= 99 * 1000, "seed {seed}: {good}");
        }
    }

    #[test]
    fn profiles_follow_shares() {
        let config = cfg(20_000, 9);
        let profiles = assign_profiles(&config, &mut stream_rng(9, STREAM_PROFILES));
        let share = |f: &dyn Fn(&NodeNetProfile) -> bool| {
            profiles.iter().filter(|p| f(p)).count() as f64 / profiles.len() as f64
        };
        assert!((share(&|p| p.region == Region::C) - 0.40).abs() < 0.02);
        assert!((share(&|p| p.upstream_bps == 256_000) - 0.60).abs() < 0.02);
        assert!((share(&|p| p.upstream_bps == 64_000) - 0.10).abs() < 0.02);
    }

    #[test]
    fn churn_draw_is_linear_in_serial() {
        let mut rng = stream_rng(4, STREAM_CHURN);
        let n = 1000;
        let mut offline_total = 0usize;
        let trials = 200;
        for _ in 0..trials {
            let flags = churn_offline_flags(n, &mut rng);
            assert!(flags[n - 1], "last serial always fails");
            offline_total += flags.iter().filter(|f| **f).count();
        }
        let mean = offline_total as f64 / (trials * n) as f64;
        let expected = (n + 1) as f64 / (2 * n) as f64;
        assert!((mean - expected).abs() < 0.01, "{mean}");
    }

    #[test]
    fn half_refuse() {
        let mut sim = Simulation::new(&cfg(1000, 2), kad(2, true), SimOptions::default()).unwrap();
        sim.apply_disturbance(DisturbanceMode::RefuseHalf, 0);
        let refusing = sim.nodes().iter().filter(|s| s.behavior == Behavior::RefuseRelay).count();
        assert_eq!(refusing, 500);
        assert!(sim.nodes().iter().all(|s| s.online));
    }

    #[test]
    fn empty_queue_gives_empty_log() {
        let mut sim = Simulation::new(
            &cfg(8, 1),
            kad(1, false),
            SimOptions { record_log: true, ..SimOptions::default() },
        )
        .unwrap();
        let summary = sim.run();
        assert_eq!(summary.events_processed, 0);
        assert!(sim.log().is_empty());
        assert!(!summary.truncated);
    }

    #[test]
    fn eight_nodes_seven_deliveries() {
        let opts = SimOptions { record_log: true, ..SimOptions::default() };
        let mut sim = Simulation::new(&cfg(8, 1), kad(1, false), opts).unwrap();
        sim.schedule_broadcasts(1, 1_000, 0);
        sim.run();
        let delivered = sim
            .log()
            .iter()
            .filter(|r| matches!(r, LogRecord::Deliver { kind: MessageKind::Data, .. }))
            .count();
        assert_eq!(delivered, 7);
        let rec = &sim.records()[0];
        assert_eq!(rec.received(), 8);
        assert!(rec.rec.latency().unwrap() > 0);
    }

    #[test]
    fn horizon_truncates() {
        let opts = SimOptions { horizon_us: Some(1), ..SimOptions::default() };
        let mut sim = Simulation::new(&cfg(16, 1), kad(2, true), opts).unwrap();
        sim.schedule_broadcasts(2, 5_000, 0);
        assert!(sim.run().truncated);
    }

    #[test]
    fn send_to_offline_peer_evicts_it() {
        let mut sim = Simulation::new(&cfg(16, 5), kad(15, false), SimOptions::default()).unwrap();
        let victim = 3;
        let victim_id = sim.nodes()[victim].id;
        sim.nodes_mut()[victim].online = false;
        let knowers: Vec<usize> = (0..16).filter(|i| sim.nodes()[*i].table.is_neighbor(&victim_id)).collect();
        assert!(!knowers.is_empty());
        sim.schedule_broadcast_from(knowers[0], 0);
        sim.run();
        assert!(!sim.nodes()[knowers[0]].table.is_neighbor(&victim_id));
        assert!(sim.counts().failed_sends >= 1);
    }

    #[test]
    fn unknown_sender_is_learned_then_scored() {
        let mut sim = Simulation::new(&cfg(16, 6), kad(1, true), SimOptions::default()).unwrap();
        let (a, b) = (0usize, 1usize);
        let a_id = sim.nodes()[a].id;
        sim.nodes_mut()[b].table.remove_peer(&a_id);
        let message = BroadcastMessage {
            hash: MessageHash(42),
            size_bytes: 128,
            source: a_id,
            relay: sim.nodes()[b].id,
            from: a_id,
            stamp: crate::protocol::Stamp(0),
            kind: MessageKind::Data,
        };
        sim.inject(a, b, message, 0);
        sim.run();
        assert_eq!(sim.nodes()[b].table.score_of(&a_id), Some(1));
    }

    #[test]
    fn full_bucket_does_not_learn_sender() {
        let mut config = cfg(64, 6);
        config.bucket_capacity = 1;
        let mut sim = Simulation::new(&config, kad(1, false), SimOptions::default()).unwrap();
        let b = 1usize;
        let b_id = sim.nodes()[b].id;
        let stranger = (0..64)
            .filter(|i| *i != b)
            .find(|i| !sim.nodes()[b].table.is_neighbor(&sim.nodes()[*i].id))
            .unwrap();
        let s_id = sim.nodes()[stranger].id;
        let message = BroadcastMessage {
            hash: MessageHash(7),
            size_bytes: 128,
            source: s_id,
            relay: b_id,
            from: s_id,
            stamp: crate::protocol::Stamp(0),
            kind: MessageKind::Data,
        };
        sim.inject(stranger, b, message, 0);
        sim.run();
        assert!(!sim.nodes()[b].table.is_neighbor(&s_id));
    }

    #[test]
    fn disturbance_clears_offline_tables_and_isolates() {
        let opts = SimOptions { record_log: true, ..SimOptions::default() };
        let mut sim = Simulation::new(&cfg(100, 8), kad(2, true), opts).unwrap();
        sim.apply_disturbance(DisturbanceMode::ChurnOnce, 0);
        sim.schedule_broadcasts(50, 10_000, 0);
        sim.run();
        let offline: Vec<usize> = (0..100).filter(|i| !sim.nodes()[*i].online).collect();
        assert!(!offline.is_empty());
        assert!(!sim.nodes()[99].online);
        for i in &offline {
            assert!(sim.nodes()[*i].table.is_empty());
        }
        for r in sim.log() {
            match r {
                LogRecord::Send { from, to, .. } => {
                    assert!(!offline.contains(from));
                    assert!(!offline.contains(to));
                }
                LogRecord::Deliver { to, .. } => assert!(!offline.contains(to), "{r:?}"),
                _ => {}
            }
        }
    }

    #[test]
    fn periodic_churn_rejoins_nodes() {
        let opts = SimOptions { churn_period_us: 100_000, ..SimOptions::default() };
        let mut sim = Simulation::new(&cfg(100, 8), kad(2, true), opts).unwrap();
        sim.apply_disturbance(DisturbanceMode::ChurnPeriodic, 1_000_000);
        sim.schedule_broadcasts(100, 10_000, 0);
        sim.run();
        let online = sim.nodes().iter().filter(|s| s.online).count();
        assert!(online > 0 && online < 100);
        assert!(sim.nodes().iter().filter(|s| s.online).all(|s| !s.table.is_empty()));
    }

    #[test]
    fn replay_is_identical() {
        let opts = SimOptions { record_log: true, ..SimOptions::default() };
        let run = || {
            let mut sim = Simulation::new(&cfg(50, 12), kad(2, true), opts).unwrap();
            sim.apply_disturbance(DisturbanceMode::ChurnOnce, 0);
            sim.schedule_broadcasts(100, 2_000, 0);
            sim.run();
            sim.log().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causality_and_link_exclusivity() {
        let opts = SimOptions { record_log: true, ..SimOptions::default() };
        let mut sim = Simulation::new(&cfg(60, 13), kad(3, true), opts).unwrap();
        sim.schedule_broadcasts(60, 1_000, 0);
        sim.run();
        let min_delay = DEFAULT_DELAYS_US.iter().flatten().min().copied().unwrap();
        let mut per_sender: HashMap<usize, Vec<(u64, u64)>> = HashMap::new();
        for r in sim.log() {
            if let LogRecord::Send { time, from, to, kind, arrival, .. } = r {
                assert!(*arrival >= time + min_delay);
                let size = match kind {
                    MessageKind::Data => 128,
                    MessageKind::Confirmation => 20,
                };
                let tx = serialization_delay_us(size, sim.profiles()[*from].upstream_bps);
                let delay = DEFAULT_DELAYS_US[sim.profiles()[*from].region.index()]
                    [sim.profiles()[*to].region.index()];
                per_sender.entry(*from).or_default().push((arrival - delay - tx, arrival - delay));
            }
        }
        for spans in per_sender.values_mut() {
            spans.sort();
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0, "overlapping transmissions {:?}", w);
            }
        }
    }
}
