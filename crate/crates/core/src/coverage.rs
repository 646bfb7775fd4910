//! Received power, SINR, UE connectivity, the coverage reward and the
//! stacked-frame state fed to the Q-networks.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_beams::{ArrayConfig, BeamPool};
use crate::channel::{channel_vector, ScenarioSnapshot};

/// Frames stacked into one network input.
pub const STACKED_FRAMES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoverageError {
    #[error("dimension mismatch: channel has {channel} entries, beam has {beam}")]
    DimensionMismatch { channel: usize, beam: usize },
    #[error("missing link for sector {sector}, ue {ue}")]
    MissingLink { sector: usize, ue: usize },
    #[error("assignment has {got} entries for {expected} sectors")]
    AssignmentLength { expected: usize, got: usize },
    #[error("beam index {index} invalid for sector {sector} (pool size {pool})")]
    BeamIndex { sector: usize, index: usize, pool: usize },
    #[error("{pools} beam pools supplied for {sectors} sectors")]
    PoolCount { sectors: usize, pools: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConstants {
    pub noise_power_dbm: f64,
    /// A UE is connected when its SINR is strictly above this.
    pub sinr_threshold_db: f64,
}

impl Default for RadioConstants {
    fn default() -> Self {
        Self { noise_power_dbm: -95.0, sinr_threshold_db: -6.0 }
    }
}

impl RadioConstants {
    pub fn noise_linear_mw(&self) -> f64 {
        10f64.powf(self.noise_power_dbm / 10.0)
    }
}

/// One beam index per sector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BeamAssignment(pub Vec<usize>);

impl BeamAssignment {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for BeamAssignment {
    /// `;`-joined indices, e.g. `1;0`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BeamAssignment {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(';').map(|p| p.trim().parse()).collect::<Result<_, _>>().map(BeamAssignment)
    }
}

/// Per-UE 0/1 connection indicators.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConnectionState {
    pub bits: Vec<u8>,
}

impl ConnectionState {
    pub fn zeros(k: usize) -> Self {
        Self { bits: vec![0; k] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub sinr_db: Vec<f64>,
    pub serving_sector: Vec<usize>,
    pub connection: ConnectionState,
    /// Number of connected UEs; the RL reward.
    pub connected_count: usize,
}

impl CoverageReport {
    /// Audit rows `step,ue_id,serving_sector,sinr_db,connected` (no header).
    pub fn write_rows<W: Write>(&self, step: u64, mut sink: W) -> std::io::Result<()> {
        for k in 0..self.sinr_db.len() {
            writeln!(
                sink,
                "{step},{k},{},{},{}",
                self.serving_sector[k], self.sinr_db[k], self.connection.bits[k]
            )?;
        }
        Ok(())
    }
}

pub const REPORT_HEADER: &str = "step,ue_id,serving_sector,sinr_db,connected";

/// `|hᵀ f|²`, plain transpose.
pub fn rx_power(h: &[Complex64], f: &[Complex64]) -> Result<f64, CoverageError> {
    if h.len() != f.len() {
        return Err(CoverageError::DimensionMismatch { channel: h.len(), beam: f.len() });
    }
    let s: Complex64 = h.iter().zip(f).map(|(a, b)| a * b).sum();
    Ok(s.norm_sqr())
}

/// Received power of every (sector, beam, UE) triple for one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTable {
    n_ues: usize,
    pool_sizes: Vec<usize>,
    /// `power[m][j * K + k]`
    power: Vec<Vec<f64>>,
}

fn check_pools(snapshot: &ScenarioSnapshot, pools: &[BeamPool]) -> Result<(), CoverageError> {
    if pools.len() != snapshot.n_sectors() {
        return Err(CoverageError::PoolCount { sectors: snapshot.n_sectors(), pools: pools.len() });
    }
    Ok(())
}

fn sector_channels(config: &ArrayConfig, snapshot: &ScenarioSnapshot, m: usize) -> Result<Vec<Vec<Complex64>>, CoverageError> {
    (0..snapshot.n_ues())
        .map(|k| {
            snapshot
                .link(m, k)
                .map(|l| channel_vector(config, l))
                .ok_or(CoverageError::MissingLink { sector: m, ue: k })
        })
        .collect()
}

impl PowerTable {
    pub fn build(config: &ArrayConfig, snapshot: &ScenarioSnapshot, pools: &[BeamPool]) -> Result<Self, CoverageError> {
        check_pools(snapshot, pools)?;
        let k_total = snapshot.n_ues();
        let mut power = Vec::with_capacity(pools.len());
        for (m, pool) in pools.iter().enumerate() {
            let hs = sector_channels(config, snapshot, m)?;
            let mut row = Vec::with_capacity(pool.len() * k_total);
            for beam in pool.iter() {
                for h in &hs {
                    row.push(rx_power(h, &beam.w)?);
                }
            }
            power.push(row);
        }
        Ok(Self {
            n_ues: k_total,
            pool_sizes: pools.iter().map(|p| p.len()).collect(),
            power,
        })
    }

    /// Build directly from `power[m][j][k]`; used for crafted instances.
    pub fn from_powers(power: Vec<Vec<Vec<f64>>>) -> Self {
        let n_ues = power.first().and_then(|p| p.first()).map(|r| r.len()).unwrap_or(0);
        let pool_sizes = power.iter().map(|p| p.len()).collect();
        let power = power.into_iter().map(|p| p.into_iter().flatten().collect()).collect();
        Self { n_ues, pool_sizes, power }
    }

    pub fn n_sectors(&self) -> usize {
        self.pool_sizes.len()
    }

    pub fn n_ues(&self) -> usize {
        self.n_ues
    }

    pub fn pool_sizes(&self) -> &[usize] {
        &self.pool_sizes
    }

    #[inline]
    pub fn power(&self, sector: usize, beam: usize, ue: usize) -> f64 {
        self.power[sector][beam * self.n_ues + ue]
    }

    /// Copy with every power multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            power: self.power.iter().map(|r| r.iter().map(|p| p * alpha).collect()).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self, assignment: &BeamAssignment) -> Result<(), CoverageError> {
        if assignment.len() != self.n_sectors() {
            return Err(CoverageError::AssignmentLength { expected: self.n_sectors(), got: assignment.len() });
        }
        for (m, (&j, &size)) in assignment.0.iter().zip(&self.pool_sizes).enumerate() {
            if j >= size {
                return Err(CoverageError::BeamIndex { sector: m, index: j, pool: size });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, assignment: &BeamAssignment, constants: &RadioConstants) -> Result<CoverageReport, CoverageError> {
        self.evaluate_with_noise(assignment, constants.noise_linear_mw(), constants.sinr_threshold_db)
    }

    /// Like [`Self::evaluate`] with noise given in linear mW.
    pub fn evaluate_with_noise(
        &self,
        assignment: &BeamAssignment,
        noise_mw: f64,
        threshold_db: f64,
    ) -> Result<CoverageReport, CoverageError> {
        self.validate(assignment)?;
        let mut sinr_db = Vec::with_capacity(self.n_ues);
        let mut serving_sector = Vec::with_capacity(self.n_ues);
        let mut bits = Vec::with_capacity(self.n_ues);
        for k in 0..self.n_ues {
            let (mut best_m, mut best_p) = (0usize, f64::NEG_INFINITY);
            for (m, &j) in assignment.0.iter().enumerate() {
                let p = self.power(m, j, k);
                if p > best_p {
                    best_m = m;
                    best_p = p;
                }
            }
            let interference: f64 = assignment
                .0
                .iter()
                .enumerate()
                .filter(|(m, _)| *m != best_m)
                .map(|(m, &j)| self.power(m, j, k))
                .sum();
            let sinr = 10.0 * (best_p / (interference + noise_mw)).log10();
            bits.push(u8::from(sinr > threshold_db));
            sinr_db.push(sinr);
            serving_sector.push(best_m);
        }
        let connection = ConnectionState { bits };
        Ok(CoverageReport {
            sinr_db,
            serving_sector,
            connected_count: connection.count(),
            connection,
        })
    }
}

/// Coverage of `snapshot` when sector `m` transmits beam `assignment[m]`.
pub fn evaluate(
    config: &ArrayConfig,
    snapshot: &ScenarioSnapshot,
    pools: &[BeamPool],
    assignment: &BeamAssignment,
    constants: &RadioConstants,
) -> Result<CoverageReport, CoverageError> {
    check_pools(snapshot, pools)?;
    // Only the assigned beams are needed; build one-beam pools for them.
    let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    let probe = PowerTable { n_ues: 0, pool_sizes: sizes, power: Vec::new() };
    probe.validate(assignment)?;
    let mut power = Vec::with_capacity(pools.len());
    for (m, pool) in pools.iter().enumerate() {
        let beam = &pool[assignment.0[m]];
        let row = sector_channels(config, snapshot, m)?
            .iter()
            .map(|h| rx_power(h, &beam.w))
            .collect::<Result<Vec<_>, _>>()?;
        power.push(vec![row]);
    }
    PowerTable::from_powers(power).evaluate(&BeamAssignment(vec![0; pools.len()]), constants)
}

/// `STACKED_FRAMES` connection frames, each `rows × cols`, newest last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateTensor {
    pub rows: usize,
    pub cols: usize,
    /// Frame-major, then row-major within a frame.
    pub data: Vec<u8>,
}

impl StateTensor {
    pub fn frame_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (STACKED_FRAMES, self.rows, self.cols)
    }

    pub fn to_input(&self) -> Vec<f64> {
        self.data.iter().map(|&b| f64::from(b)).collect()
    }
}

/// Stack the newest four connection vectors into frames of `cols` columns.
/// Short histories repeat their oldest entry.
pub fn encode_state(history: &[ConnectionState], cols: usize) -> StateTensor {
    assert!(cols >= 1, "frame needs at least one column");
    assert!(!history.is_empty(), "need at least one connection state");
    let k = history.last().map(|s| s.len()).unwrap_or(0);
    let rows = k.div_ceil(cols).max(1);
    let tail = &history[history.len().saturating_sub(STACKED_FRAMES)..];
    let pad = STACKED_FRAMES - tail.len();
    let mut data = Vec::with_capacity(STACKED_FRAMES * rows * cols);
    for state in std::iter::repeat_n(&tail[0], pad).chain(tail.iter()) {
        data.extend_from_slice(&state.bits);
        data.resize(data.len() + rows * cols - state.bits.len(), 0);
    }
    StateTensor { rows, cols, data }
}

/// `Σ γ^i r_i` over a finite horizon.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}
