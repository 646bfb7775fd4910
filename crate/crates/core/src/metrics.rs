//! Convergence diagnostics against the oracle: average squared reward
//! difference (ASD), action mismatch (AM) and windowed error bands, plus the
//! per-step trace and windowed metrics files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::BeamAssignment;

/// Steps per aggregation window.
pub const DEFAULT_WINDOW: usize = 200;

pub const TRACE_HEADER: [&str; 7] = ["step", "scenario_id", "epsilon", "actions", "reward", "oracle_reward", "oracle_actions"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sequence lengths differ: {0}")]
    LengthMismatch(String),
    #[error("empty window")]
    EmptyWindow,
    #[error("trace parse error at record {record}: {msg}")]
    Parse { record: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aligned agent and oracle sequences over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceWindow {
    pub agent_rewards: Vec<usize>,
    pub oracle_rewards: Vec<usize>,
    pub agent_actions: Vec<BeamAssignment>,
    pub oracle_actions: Vec<BeamAssignment>,
}

impl TraceWindow {
    pub fn new(
        agent_rewards: Vec<usize>,
        oracle_rewards: Vec<usize>,
        agent_actions: Vec<BeamAssignment>,
        oracle_actions: Vec<BeamAssignment>,
    ) -> Result<Self, MetricsError> {
        let n = agent_rewards.len();
        if oracle_rewards.len() != n || agent_actions.len() != n || oracle_actions.len() != n {
            return Err(MetricsError::LengthMismatch(format!(
                "rewards {}/{}, actions {}/{}",
                n,
                oracle_rewards.len(),
                agent_actions.len(),
                oracle_actions.len()
            )));
        }
        if let Some(bad) = agent_actions.iter().zip(&oracle_actions).find(|(a, o)| a.len() != o.len()) {
            return Err(MetricsError::LengthMismatch(format!("assignment widths {} and {}", bad.0.len(), bad.1.len())));
        }
        if n == 0 {
            return Err(MetricsError::EmptyWindow);
        }
        Ok(Self { agent_rewards, oracle_rewards, agent_actions, oracle_actions })
    }

    pub fn from_records(records: &[StepRecord]) -> Result<Self, MetricsError> {
        Self::new(
            records.iter().map(|r| r.reward).collect(),
            records.iter().map(|r| r.oracle_reward).collect(),
            records.iter().map(|r| r.actions.clone()).collect(),
            records.iter().map(|r| r.oracle_actions.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.agent_rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_rewards.is_empty()
    }

    pub fn n_sectors(&self) -> usize {
        self.agent_actions.first().map(BeamAssignment::len).unwrap_or(0)
    }

    fn squared_diffs(&self) -> impl Iterator<Item = f64> + '_ {
        self.agent_rewards.iter().zip(&self.oracle_rewards).map(|(&a, &o)| {
            let d = a as f64 - o as f64;
            d * d
        })
    }
}

pub fn asd(window: &TraceWindow) -> f64 {
    window.squared_diffs().sum::<f64>() / window.len() as f64
}

/// Fraction of steps whose joint assignment differs from the oracle's.
pub fn am(window: &TraceWindow) -> f64 {
    let mismatches = window.agent_actions.iter().zip(&window.oracle_actions).filter(|(a, o)| a != o).count();
    mismatches as f64 / window.len() as f64
}

/// Per-sector fraction of steps whose beam differs from the oracle's.
pub fn am_per_sector(window: &TraceWindow) -> Vec<f64> {
    (0..window.n_sectors())
        .map(|m| {
            let n = window.agent_actions.iter().zip(&window.oracle_actions).filter(|(a, o)| a.0[m] != o.0[m]).count();
            n as f64 / window.len() as f64
        })
        .collect()
}

/// Joint AM that forgives any assignment earning the oracle reward.
pub fn am_reward_equivalent(window: &TraceWindow) -> f64 {
    let n = (0..window.len())
        .filter(|&t| window.agent_actions[t] != window.oracle_actions[t] && window.agent_rewards[t] != window.oracle_rewards[t])
        .count();
    n as f64 / window.len() as f64
}

/// Per-sector AM where a differing beam still matches on steps whose joint
/// reward equals the oracle reward.
pub fn am_reward_equivalent_per_sector(window: &TraceWindow) -> Vec<f64> {
    (0..window.n_sectors())
        .map(|m| {
            let n = (0..window.len())
                .filter(|&t| {
                    window.agent_actions[t].0[m] != window.oracle_actions[t].0[m]
                        && window.agent_rewards[t] != window.oracle_rewards[t]
                })
                .count();
            n as f64 / window.len() as f64
        })
        .collect()
}

/// `(mean, max |x − mean|)`.
pub fn error_band(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let dev = values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    Ok((mean, dev))
}

/// One line of the per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub scenario_id: String,
    pub epsilon: f64,
    pub actions: BeamAssignment,
    pub reward: usize,
    pub oracle_reward: usize,
    pub oracle_actions: BeamAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window_start: u64,
    pub asd: f64,
    pub asd_maxdev: f64,
    pub am_sector: Vec<f64>,
    pub am_joint: f64,
    pub reward_eq_am_sector: Vec<f64>,
}

impl WindowMetrics {
    pub fn of(window_start: u64, window: &TraceWindow) -> Self {
        let diffs: Vec<f64> = window.squared_diffs().collect();
        let (asd, asd_maxdev) = error_band(&diffs).expect("windows are non-empty");
        Self {
            window_start,
            asd,
            asd_maxdev,
            am_sector: am_per_sector(window),
            am_joint: am(window),
            reward_eq_am_sector: am_reward_equivalent_per_sector(window),
        }
    }

    /// Strict AM is zero in every sector.
    pub fn converged(&self) -> bool {
        self.am_joint == 0.0
    }
}

/// Metrics over disjoint consecutive blocks of `window` records; a trailing
/// partial block is dropped.
pub fn windowed(records: &[StepRecord], window: usize) -> Result<Vec<WindowMetrics>, MetricsError> {
    assert!(window >= 1, "window must hold at least one step");
    records
        .chunks_exact(window)
        .map(|chunk| Ok(WindowMetrics::of(chunk[0].step, &TraceWindow::from_records(chunk)?)))
        .collect()
}

pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(sink: W) -> Result<Self, MetricsError> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(TRACE_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<(), MetricsError> {
        self.inner.write_record([
            r.step.to_string(),
            r.scenario_id.clone(),
            r.epsilon.to_string(),
            r.actions.to_string(),
            r.reward.to_string(),
            r.oracle_reward.to_string(),
            r.oracle_actions.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_trace<R: Read>(source: R) -> Result<Vec<StepRecord>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(source);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(MetricsError::Parse { record: 0, msg: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()) });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| MetricsError::Parse { record: i + 1, msg };
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| field(j).parse::<usize>().map_err(|e| bad(format!("{}: {e}", TRACE_HEADER[j])));
        out.push(StepRecord {
            step: field(0).parse().map_err(|e| bad(format!("step: {e}")))?,
            scenario_id: field(1).to_string(),
            epsilon: field(2).parse().map_err(|e| bad(format!("epsilon: {e}")))?,
            actions: field(3).parse().map_err(|e| bad(format!("actions: {e:?}")))?,
            reward: num(4)?,
            oracle_reward: num(5)?,
            oracle_actions: field(6).parse().map_err(|e| bad(format!("oracle_actions: {e:?}")))?,
        });
    }
    Ok(out)
}

pub fn write_metrics<W: Write>(sink: W, rows: &[WindowMetrics], n_sectors: usize) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["window_start".to_string(), "asd".into(), "asd_maxdev".into()];
    header.extend((0..n_sectors).map(|m| format!("am_sector_{m}")));
    header.push("am_joint".into());
    header.extend((0..n_sectors).map(|m| format!("reward_eq_am_sector_{m}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.window_start.to_string(), r.asd.to_string(), r.asd_maxdev.to_string()];
        rec.extend(r.am_sector.iter().map(f64::to_string));
        rec.push(r.am_joint.to_string());
        rec.extend(r.reward_eq_am_sector.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
