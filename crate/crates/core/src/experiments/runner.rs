//! Experiment drivers.
//!
//! A scenario expands into cells `(disturbance mode, beta or fanout,
//! variant)`, each run `repeats` times. Every (cell, repeat) pair is an
//! independent simulation instance; instances run through [`crate::par`] and
//! are reassembled by index, so results do not depend on scheduling. Repeat
//! `r` uses topology seed `seed + r` for every variant, which pairs the
//! variants on identical overlays.

use serde::Serialize;

use crate::experiments::config::{ConfigError, Scenario, ScenarioConfig, Variant};
use crate::metrics::{coverage_malicious, coverage_offline, round4, LatencySummary, MetricsError};
use crate::netsim::{
    BroadcastRecord, Dissemination, DisturbanceMode, LogRecord, SimError, SimOptions, Simulation,
    TransmissionCounts, MICROS_PER_SECOND,
};
use crate::par;
use crate::protocol::{Behavior, Gossip, KademliaBroadcast};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Cell {
    pub mode: DisturbanceMode,
    /// Relays per bucket, or the fanout for gossip.
    pub beta: usize,
    pub variant: Variant,
}

/// Per-broadcast row of the results CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastRow {
    pub seq: usize,
    pub initiator: Option<usize>,
    pub latency_us: Option<u64>,
    pub complete: bool,
    pub received: usize,
    pub received_honest: usize,
    pub online_at_start: usize,
    pub data_transmissions: u64,
    pub confirmations: u64,
}

impl From<&BroadcastRecord> for BroadcastRow {
    fn from(r: &BroadcastRecord) -> Self {
        BroadcastRow {
            seq: r.seq,
            initiator: r.initiator,
            latency_us: r.rec.latency(),
            complete: r.rec.is_complete(),
            received: r.received(),
            received_honest: r.received_honest,
            online_at_start: r.online_at_start,
            data_transmissions: r.transmissions.data,
            confirmations: r.transmissions.confirmation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub cell: Cell,
    pub repeat: usize,
    pub rows: Vec<BroadcastRow>,
    pub honest_nodes: usize,
    pub counts: TransmissionCounts,
    pub truncated: bool,
    pub log: Vec<LogRecord>,
}

impl InstanceResult {
    pub fn received(&self) -> u64 {
        self.rows.iter().map(|r| r.received as u64).sum()
    }

    pub fn received_honest(&self) -> u64 {
        self.rows.iter().map(|r| r.received_honest as u64).sum()
    }

    pub fn reachable(&self) -> u64 {
        self.rows.iter().map(|r| r.online_at_start as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransmissionSummary {
    pub data: u64,
    pub confirmation: u64,
    pub data_bytes: u64,
    pub confirmation_bytes: u64,
    pub failed_sends: u64,
    pub data_per_broadcast: f64,
}

/// Aggregate over all repeats of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub disturbance: DisturbanceMode,
    pub variant: Variant,
    pub beta: usize,
    pub repeats: usize,
    pub broadcasts_per_repeat: usize,
    /// Fixed-N coverage for churn and static runs, honest-only for refusers.
    pub coverage_pct: f64,
    /// Share of deliveries missed among the nodes that could have received
    /// them (online at initiation; honest nodes under refusers).
    pub unreceived_pct: f64,
    pub per_repeat_coverage_pct: Vec<f64>,
    pub latency_us: LatencySummary,
    pub transmissions: TransmissionSummary,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub instances: Vec<InstanceResult>,
    pub summaries: Vec<CellSummary>,
}

impl ScenarioOutcome {
    pub fn truncated(&self) -> bool {
        self.instances.iter().any(|i| i.truncated)
    }

    pub fn summary(&self, mode: DisturbanceMode, beta: usize, variant: Variant) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.disturbance == mode && s.beta == beta && s.variant == variant)
    }
}

pub fn cells(config: &ScenarioConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for mode in config.modes() {
        if config.scenario == Scenario::GossipSweep {
            for fanout in &config.protocol.fanouts {
                out.push(Cell { mode, beta: *fanout, variant: Variant::Gossip });
            }
        } else {
            for beta in &config.protocol.betas {
                for variant in &config.protocol.variants {
                    out.push(Cell { mode, beta: *beta, variant: *variant });
                }
            }
        }
    }
    out
}

fn dissemination(config: &ScenarioConfig, cell: &Cell) -> Dissemination {
    match cell.variant {
        Variant::Kademlia => {
            Dissemination::Kademlia(KademliaBroadcast::new(config.kademlia_params(cell.beta, false)))
        }
        Variant::Ne => {
            Dissemination::Kademlia(KademliaBroadcast::new(config.kademlia_params(cell.beta, true)))
        }
        Variant::Gossip => Dissemination::Gossip(Gossip { fanout: cell.beta }),
    }
}

/// Builds and runs one simulation instance.
pub fn run_instance(config: &ScenarioConfig, cell: Cell, repeat: usize) -> Result<InstanceResult, RunError> {
    let mut network = config.network.clone();
    network.seed = config.seed.wrapping_add(repeat as u64);
    let options = SimOptions {
        record_log: config.output.event_log,
        horizon_us: config.horizon_us(),
        churn_period_us: config.disturbance.period_s * MICROS_PER_SECOND,
    };
    let mut sim = Simulation::new(&network, dissemination(config, &cell), options)?;
    let count = config.broadcasts();
    let interval = config.interval_us();
    let last_initiation = interval * count.saturating_sub(1) as u64;
    sim.apply_disturbance(cell.mode, last_initiation);
    sim.schedule_broadcasts(count, interval, 0);
    let summary = sim.run();
    let mut rows: Vec<BroadcastRow> = sim.records().iter().map(BroadcastRow::from).collect();
    rows.sort_by_key(|r| r.seq);
    let honest_nodes = sim.nodes().iter().filter(|s| s.behavior == Behavior::Honest).count();
    Ok(InstanceResult {
        cell,
        repeat,
        rows,
        honest_nodes,
        counts: sim.counts(),
        truncated: summary.truncated,
        log: sim.log().to_vec(),
    })
}

fn summarize(config: &ScenarioConfig, cell: Cell, runs: &[&InstanceResult]) -> Result<CellSummary, RunError> {
    let n = config.network.n_nodes as u64;
    let broadcasts = config.broadcasts() as u64;
    let refuse = cell.mode == DisturbanceMode::RefuseHalf;
    let per_repeat: Vec<f64> = runs
        .iter()
        .map(|r| {
            if refuse {
                coverage_malicious(&[r.received_honest()], broadcasts, &[r.honest_nodes as u64])
            } else {
                coverage_offline(&[r.received()], broadcasts, n)
            }
        })
        .collect::<Result<_, _>>()?;
    let coverage = if refuse {
        let received: Vec<u64> = runs.iter().map(|r| r.received_honest()).collect();
        let honest: Vec<u64> = runs.iter().map(|r| r.honest_nodes as u64).collect();
        coverage_malicious(&received, broadcasts, &honest)?
    } else {
        let received: Vec<u64> = runs.iter().map(|r| r.received()).collect();
        coverage_offline(&received, broadcasts, n)?
    };
    let unreceived = if refuse {
        100.0 - coverage
    } else {
        let reachable: u64 = runs.iter().map(|r| r.reachable()).sum();
        let received: u64 = runs.iter().map(|r| r.received()).sum();
        if reachable == 0 {
            0.0
        } else {
            100.0 * (1.0 - received as f64 / reachable as f64)
        }
    };
    let mut counts = TransmissionCounts::default();
    for r in runs {
        counts.merge(&r.counts);
    }
    let total_broadcasts = broadcasts as f64 * runs.len() as f64;
    Ok(CellSummary {
        disturbance: cell.mode,
        variant: cell.variant,
        beta: cell.beta,
        repeats: runs.len(),
        broadcasts_per_repeat: broadcasts as usize,
        coverage_pct: round4(coverage),
        unreceived_pct: round4(unreceived),
        per_repeat_coverage_pct: per_repeat.into_iter().map(round4).collect(),
        latency_us: LatencySummary::from_latencies(
            runs.iter().flat_map(|r| r.rows.iter().map(|row| row.latency_us)),
        ),
        transmissions: TransmissionSummary {
            data: counts.data,
            confirmation: counts.confirmation,
            data_bytes: counts.data_bytes,
            confirmation_bytes: counts.confirmation_bytes,
            failed_sends: counts.failed_sends,
            data_per_broadcast: round4(counts.data as f64 / total_broadcasts),
        },
        truncated: runs.iter().any(|r| r.truncated),
    })
}

/// Runs every cell of a scenario, `repeats` times each.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome, RunError> {
    config.validate()?;
    let cells = cells(config);
    let repeats = config.repeats;
    let jobs = cells.len() * repeats;
    let results = par::map_indexed(jobs, |k| run_instance(config, cells[k / repeats], k % repeats));
    let instances: Vec<InstanceResult> = results.into_iter().collect::<Result<_, _>>()?;
    let summaries = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let runs: Vec<&InstanceResult> = instances[c * repeats..(c + 1) * repeats].iter().collect();
            summarize(config, *cell, &runs)
        })
        .collect::<Result<_, _>>()?;
    Ok(ScenarioOutcome { config: config.clone(), instances, summaries })
}

/// Latency experiment: round-robin initiations at a fixed interval, all
/// nodes online, every configured variant on the same overlays.
pub fn run_latency(config: &ScenarioConfig) -> Result<ScenarioOutcome, RunError> {
    let mut config = config.clone();
    config.scenario = Scenario::Latency;
    run_scenario(&config)
}

pub fn run_coverage(config: &ScenarioConfig) -> Result<ScenarioOutcome, RunError> {
    if !matches!(config.scenario, Scenario::CoverageOffline | Scenario::CoverageRefuse) {
        return Err(ConfigError::Invalid {
            field: "scenario".into(),
            reason: "coverage runs need coverage_offline or coverage_refuse".into(),
        }
        .into());
    }
    run_scenario(config)
}

pub fn run_gossip_sweep(config: &ScenarioConfig) -> Result<ScenarioOutcome, RunError> {
    let mut config = config.clone();
    config.scenario = Scenario::GossipSweep;
    run_scenario(&config)
}

/// Result of checking exactly-once delivery in a static network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub n_nodes: usize,
    pub broadcasts: usize,
    pub incomplete: usize,
    pub wrong_transmission_count: usize,
    pub duplicate_deliveries: u64,
    pub coverage_pct: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.incomplete == 0
            && self.wrong_transmission_count == 0
            && self.duplicate_deliveries == 0
            && self.coverage_pct == 100.0
    }
}

/// Fault-free audit: beta 1, uniform relays, every node starts one broadcast
/// (or `config.broadcasts()` of them). Each broadcast must reach all nodes
/// with exactly `n - 1` data transmissions.
pub fn faultfree_audit(config: &ScenarioConfig) -> Result<AuditReport, RunError> {
    let mut config = config.clone();
    config.scenario = Scenario::FaultfreeAudit;
    config.protocol.betas = vec![1];
    config.protocol.variants = vec![Variant::Kademlia];
    config.output.event_log = true;
    config.validate()?;
    let cell = Cell { mode: DisturbanceMode::None, beta: 1, variant: Variant::Kademlia };
    let run = run_instance(&config, cell, 0)?;
    let n = config.network.n_nodes;
    let duplicates = run
        .log
        .iter()
        .filter(|r| {
            matches!(r, LogRecord::Deliver { outcome: crate::protocol::ReceiveOutcome::Duplicate, .. })
        })
        .count() as u64;
    let coverage = coverage_offline(&[run.received()], run.rows.len() as u64, n as u64)?;
    Ok(AuditReport {
        n_nodes: n,
        broadcasts: run.rows.len(),
        incomplete: run.rows.iter().filter(|r| !r.complete).count(),
        wrong_transmission_count: run.rows.iter().filter(|r| r.data_transmissions != n as u64 - 1).count(),
        duplicate_deliveries: duplicates,
        coverage_pct: round4(coverage),
    })
}
