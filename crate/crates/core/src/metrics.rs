//! Delivery accounting and the latency / coverage statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("node {node} counted twice for one broadcast")]
    DoubleCount { node: usize },
    #[error("receipt recorded before the broadcast started")]
    NotStarted,
    #[error("coverage denominator is zero")]
    ZeroDenominator,
    #[error("{received} received tallies but {honest} honest tallies")]
    RepeatMismatch { received: usize, honest: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordEvent {
    Initiate { time: u64 },
    Receipt { time: u64, node: usize },
}

/// Per-broadcast delivery record: how many distinct nodes hold the message and
/// when the last one needed for full coverage got it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRec {
    received_count: usize,
    start: Option<u64>,
    last_receive: Option<u64>,
    full_coverage: usize,
    seen: Vec<u64>,
}

impl MessageRec {
    /// `full_coverage` is the receipt count at which the broadcast is complete.
    pub fn new(n_nodes: usize, full_coverage: usize) -> Self {
        MessageRec {
            received_count: 0,
            start: None,
            last_receive: None,
            full_coverage,
            seen: vec![0; n_nodes.div_ceil(64)],
        }
    }

    pub fn record(&mut self, event: RecordEvent) -> Result<(), MetricsError> {
        match event {
            RecordEvent::Initiate { time } => {
                self.start = Some(time);
            }
            RecordEvent::Receipt { time, node } => {
                if self.start.is_none() {
                    return Err(MetricsError::NotStarted);
                }
                let (word, bit) = (node / 64, 1u64 << (node % 64));
                if self.seen[word] & bit != 0 {
                    return Err(MetricsError::DoubleCount { node });
                }
                self.seen[word] |= bit;
                self.received_count += 1;
                if self.received_count == self.full_coverage {
                    self.last_receive = Some(time);
                }
            }
        }
        Ok(())
    }

    pub fn received_count(&self) -> usize {
        self.received_count
    }

    pub fn start(&self) -> Option<u64> {
        self.start
    }

    pub fn last_receive(&self) -> Option<u64> {
        self.last_receive
    }

    pub fn full_coverage(&self) -> usize {
        self.full_coverage
    }

    pub fn has_received(&self, node: usize) -> bool {
        self.seen[node / 64] & (1u64 << (node % 64)) != 0
    }

    pub fn is_complete(&self) -> bool {
        self.last_receive.is_some()
    }

    /// Time from initiation to the last receipt, once coverage is complete.
    pub fn latency(&self) -> Option<u64> {
        Some(self.last_receive? - self.start?)
    }
}

/// Coverage with a fixed node count in the denominator:
/// `sum(received) / (rounds * repeats * n) * 100`, where `rounds` is the
/// number of broadcasts per repeat.
pub fn coverage_offline(received: &[u64], rounds: u64, n: u64) -> Result<f64, MetricsError> {
    let denom = rounds as f64 * received.len() as f64 * n as f64;
    if denom == 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok(received.iter().sum::<u64>() as f64 / denom * 100.0)
}

/// Coverage over honest nodes only:
/// `sum(received) / (rounds * sum(honest)) * 100`.
pub fn coverage_malicious(received: &[u64], rounds: u64, honest: &[u64]) -> Result<f64, MetricsError> {
    if received.len() != honest.len() {
        return Err(MetricsError::RepeatMismatch { received: received.len(), honest: honest.len() });
    }
    let denom = rounds as f64 * honest.iter().sum::<u64>() as f64;
    if denom == 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok(received.iter().sum::<u64>() as f64 / denom * 100.0)
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub complete: usize,
    pub incomplete: usize,
    pub p50: Option<u64>,
    pub p90: Option<u64>,
    pub p99: Option<u64>,
}

impl LatencySummary {
    pub fn from_latencies<I: IntoIterator<Item = Option<u64>>>(latencies: I) -> Self {
        let mut done = Vec::new();
        let mut incomplete = 0;
        for l in latencies {
            match l {
                Some(v) => done.push(v),
                None => incomplete += 1,
            }
        }
        done.sort_unstable();
        LatencySummary {
            complete: done.len(),
            incomplete,
            p50: percentile(&done, 50.0),
            p90: percentile(&done, 90.0),
            p99: percentile(&done, 99.0),
        }
    }
}

pub fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}
