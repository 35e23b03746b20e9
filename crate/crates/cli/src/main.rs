use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nebcast::experiments::{
    emit_results, faultfree_audit, run_scenario, CellSummary, Scenario, ScenarioConfig,
};

/// Exit codes.
const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRUNCATED: u8 = 3;

#[derive(Parser)]
#[command(name = "nebcast", version, about = "Kademlia broadcast simulator with neighbor evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a TOML config and write CSV/JSON results.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set network.n_nodes=100`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; falls back to `output.dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check exactly-once delivery on a static network.
    Audit {
        #[arg(long, value_enum, default_value_t = AuditKind::Faultfree)]
        scenario: AuditKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the built-in config for a scenario as TOML.
    Defaults {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AuditKind {
    Faultfree,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Latency,
    CoverageOffline,
    CoverageRefuse,
    GossipSweep,
    FaultfreeAudit,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Latency => Scenario::Latency,
            ScenarioArg::CoverageOffline => Scenario::CoverageOffline,
            ScenarioArg::CoverageRefuse => Scenario::CoverageRefuse,
            ScenarioArg::GossipSweep => Scenario::GossipSweep,
            ScenarioArg::FaultfreeAudit => Scenario::FaultfreeAudit,
        }
    }
}

fn fmt_opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

fn print_table(rows: &[CellSummary]) {
    println!(
        "{:<15} {:<9} {:>5} {:>10} {:>11} {:>12} {:>12} {:>10} {:>12}",
        "disturbance",
        "variant",
        "beta",
        "coverage%",
        "unreceived%",
        "p50_us",
        "p90_us",
        "incomplete",
        "confirm_B"
    );
    for s in rows {
        println!(
            "{:<15} {:<9} {:>5} {:>10.4} {:>11.4} {:>12} {:>12} {:>10} {:>12}",
            serde_json::to_value(s.disturbance)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            s.variant.as_str(),
            s.beta,
            s.coverage_pct,
            s.unreceived_pct,
            fmt_opt(s.latency_us.p50),
            fmt_opt(s.latency_us.p90),
            s.latency_us.incomplete,
            s.transmissions.confirmation_bytes,
        );
    }
}

fn simulate(config: PathBuf, overrides: Vec<String>, out: Option<PathBuf>) -> ExitCode {
    let config = match ScenarioConfig::load(&config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let Some(dir) = out.or_else(|| config.output.dir.clone()) else {
        eprintln!("error: no output directory; pass --out or set output.dir");
        return ExitCode::from(EXIT_CONFIG);
    };
    let outcome = match run_scenario(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = emit_results(&outcome, &dir) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    print_table(&outcome.summaries);
    println!("results written to {}", dir.display());
    if outcome.truncated() {
        eprintln!("warning: run hit the simulation horizon before the event queue drained");
        return ExitCode::from(EXIT_TRUNCATED);
    }
    ExitCode::SUCCESS
}

fn audit(n: usize, seed: u64) -> ExitCode {
    let mut config = ScenarioConfig::desk(Scenario::FaultfreeAudit);
    config.network.n_nodes = n;
    config.seed = seed;
    match faultfree_audit(&config) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.passed() {
                println!("audit passed");
                ExitCode::SUCCESS
            } else {
                println!("audit FAILED");
                ExitCode::from(EXIT_FAILED)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, overrides, out } => simulate(config, overrides, out),
        Command::Audit { scenario: AuditKind::Faultfree, n, seed } => audit(n, seed),
        Command::Defaults { scenario, profile } => {
            let config = match profile {
                Profile::Desk => ScenarioConfig::desk(scenario.into()),
                Profile::Full => ScenarioConfig::full_scale(scenario.into()),
            };
            print!("{}", config.to_toml_string());
            ExitCode::SUCCESS
        }
    }
}
