//! Exhaustive search over every beam assignment: the convergence reference
//! the learned agents are scored against.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::array_beams::{ArrayConfig, BeamPool};
use crate::channel::ScenarioSnapshot;
use crate::coverage::{BeamAssignment, CoverageError, PowerTable, RadioConstants};

/// Largest search space the oracle agrees to enumerate.
pub const MAX_ASSIGNMENTS: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("search space of {size} assignments exceeds the budget of {MAX_ASSIGNMENTS}")]
    BudgetExceeded { size: u128 },
    #[error(transparent)]
    Coverage(#[from] CoverageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_assignment: BeamAssignment,
    pub best_reward: usize,
    /// Every assignment's reward, when auditing was requested.
    pub per_assignment_rewards: Option<BTreeMap<BeamAssignment, usize>>,
}

pub fn search_space(pool_sizes: &[usize]) -> u128 {
    pool_sizes.iter().fold(1u128, |acc, &j| acc.saturating_mul(j as u128))
}

/// Lexicographic successor of `current` (last sector fastest); `false` once
/// the enumeration wraps.
fn advance(current: &mut [usize], sizes: &[usize]) -> bool {
    for m in (0..current.len()).rev() {
        current[m] += 1;
        if current[m] < sizes[m] {
            return true;
        }
        current[m] = 0;
    }
    false
}

/// Best assignment over a precomputed power table. Ties resolve to the
/// lexicographically smallest maximizer.
pub fn exhaustive_best_table(table: &PowerTable, constants: &RadioConstants, audit: bool) -> Result<OracleResult, OracleError> {
    let sizes = table.pool_sizes().to_vec();
    let size = search_space(&sizes);
    if size > MAX_ASSIGNMENTS {
        return Err(OracleError::BudgetExceeded { size });
    }
    let mut current = vec![0usize; sizes.len()];
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut log = audit.then(BTreeMap::new);
    loop {
        let assignment = BeamAssignment(current.clone());
        let reward = table.evaluate(&assignment, constants)?.connected_count;
        if best.as_ref().is_none_or(|(r, _)| reward > *r) {
            best = Some((reward, current.clone()));
        }
        if let Some(log) = log.as_mut() {
            log.insert(assignment, reward);
        }
        if !advance(&mut current, &sizes) {
            break;
        }
    }
    let (best_reward, best) = best.expect("search space is non-empty");
    Ok(OracleResult {
        best_assignment: BeamAssignment(best),
        best_reward,
        per_assignment_rewards: log,
    })
}

pub fn exhaustive_best(
    config: &ArrayConfig,
    snapshot: &ScenarioSnapshot,
    pools: &[BeamPool],
    constants: &RadioConstants,
) -> Result<OracleResult, OracleError> {
    let size = search_space(&pools.iter().map(|p| p.len()).collect::<Vec<_>>());
    if size > MAX_ASSIGNMENTS {
        return Err(OracleError::BudgetExceeded { size });
    }
    let table = PowerTable::build(config, snapshot, pools)?;
    exhaustive_best_table(&table, constants, false)
}

pub const ORACLE_TRACE_HEADER: &str = "step,scenario_id,best_assignment,best_reward";
