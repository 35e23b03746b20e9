//! Scenario configuration, experiment drivers and result files.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{ConfigError, Scenario, ScenarioConfig, Variant};
pub use output::{emit_results, OutputError, CSV_HEADER};
pub use runner::{
    faultfree_audit, run_coverage, run_gossip_sweep, run_latency, run_scenario, AuditReport, CellSummary,
    RunError, ScenarioOutcome,
};
