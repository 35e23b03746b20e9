//! Result files.
//!
//! - `broadcasts_<mode>_r<repeat>.csv`: one row per broadcast per cell.
//! - `summary.json`: resolved config, per-cell coverage, latency percentiles
//!   and transmission counts.
//! - `events_<mode>_<variant>_b<beta>_r<repeat>.csv`: full event log, only
//!   when `output.event_log` is set.
//!
//! Contents depend only on the config, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::experiments::config::ScenarioConfig;
use crate::experiments::runner::{CellSummary, InstanceResult, ScenarioOutcome};
use crate::netsim::{DisturbanceMode, EVENT_LOG_HEADER};

pub const CSV_HEADER: &str = "seq,initiator,variant,beta,latency_us,complete,received";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write results to {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn mode_name(mode: DisturbanceMode) -> &'static str {
    match mode {
        DisturbanceMode::None => "none",
        DisturbanceMode::ChurnOnce => "churn_once",
        DisturbanceMode::ChurnPeriodic => "churn_periodic",
        DisturbanceMode::RefuseHalf => "refuse_half",
    }
}

#[derive(Serialize)]
struct Metadata {
    initiator_counts_as_received: bool,
    unreceived_basis: &'static str,
    gossip_graph: &'static str,
    csv_beta_column: &'static str,
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: String,
    seed: u64,
    truncated: bool,
    metadata: Metadata,
    config: &'a ScenarioConfig,
    results: &'a [CellSummary],
}

/// Rows for every cell of one (mode, repeat), cells in config order.
pub fn broadcasts_csv<'a, I>(instances: I) -> String
where
    I: IntoIterator<Item = &'a InstanceResult>,
{
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for inst in instances {
        for row in &inst.rows {
            let initiator = row.initiator.map(|i| i.to_string()).unwrap_or_default();
            let latency = row.latency_us.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.seq, initiator, inst.cell.variant, inst.cell.beta, latency, row.complete, row.received
            );
        }
    }
    out
}

pub fn summary_json(outcome: &ScenarioOutcome) -> String {
    let summary = Summary {
        scenario: outcome.config.scenario.to_string(),
        seed: outcome.config.seed,
        truncated: outcome.truncated(),
        metadata: Metadata {
            initiator_counts_as_received: true,
            unreceived_basis: "nodes online at initiation (honest nodes when refusers are present)",
            gossip_graph: "routing-table neighbor sets from the Kademlia bootstrap",
            csv_beta_column: "relays per bucket; fanout for gossip",
        },
        config: &outcome.config,
        results: &outcome.summaries,
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    text
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, OutputError> {
    fs::write(&path, contents).map_err(|source| OutputError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Writes all result files into `dir`, creating it if needed.
pub fn emit_results(outcome: &ScenarioOutcome, dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    let mut modes: Vec<DisturbanceMode> = Vec::new();
    for inst in &outcome.instances {
        if !modes.contains(&inst.cell.mode) {
            modes.push(inst.cell.mode);
        }
    }
    for mode in modes {
        for repeat in 0..outcome.config.repeats {
            let group = outcome.instances.iter().filter(|i| i.cell.mode == mode && i.repeat == repeat);
            let name = format!("broadcasts_{}_r{}.csv", mode_name(mode), repeat);
            written.push(write(dir.join(name), &broadcasts_csv(group))?);
        }
    }
    if outcome.config.output.event_log {
        for inst in &outcome.instances {
            let mut text = String::from(EVENT_LOG_HEADER);
            text.push('\n');
            for rec in &inst.log {
                text.push_str(&rec.csv_row());
                text.push('\n');
            }
            let name = format!(
                "events_{}_{}_b{}_r{}.csv",
                mode_name(inst.cell.mode),
                inst.cell.variant,
                inst.cell.beta,
                inst.repeat
            );
            written.push(write(dir.join(name), &text)?);
        }
    }
    written.push(write(dir.join("summary.json"), &summary_json(outcome))?);
    Ok(written)
}
