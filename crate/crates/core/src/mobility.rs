//! UE population movement: scenario regions, periodic and Markov switching,
//! and position sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("scenario {id}: empty region on {axis} axis ({lo} > {hi})")]
    EmptyRegion { id: String, axis: char, lo: f64, hi: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown scenario id {0:?}")]
    UnknownScenario(String),
    #[error("scenario state {state} out of range ({n} states)")]
    StateIndex { state: usize, n: usize },
}

/// Axis-aligned box that bounds the whole cell; scenario bounds that are
/// left open fall back to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellExtent {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

/// A UE distribution: uniform over a coordinate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDef {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Region {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        [self.x, self.y, self.z]
            .iter()
            .zip(p)
            .all(|(b, v)| *v >= b[0] && *v <= b[1])
    }
}

impl ScenarioDef {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), x_min: None, x_max: None, y_min: None, y_max: None, z_min: None, z_max: None }
    }

    /// Close open bounds with the cell extent.
    pub fn region(&self, cell: &CellExtent) -> Result<Region, MobilityError> {
        let axis = |name: char, lo: Option<f64>, hi: Option<f64>, cell: [f64; 2]| {
            let (lo, hi) = (lo.unwrap_or(cell[0]), hi.unwrap_or(cell[1]));
            if !(lo <= hi) {
                return Err(MobilityError::EmptyRegion { id: self.id.clone(), axis: name, lo, hi });
            }
            Ok([lo, hi])
        };
        Ok(Region {
            x: axis('x', self.x_min, self.x_max, cell.x)?,
            y: axis('y', self.y_min, self.y_max, cell.y)?,
            z: axis('z', self.z_min, self.z_max, cell.z)?,
        })
    }

    /// Does `p` satisfy this scenario's own coordinate predicate?
    pub fn admits(&self, p: &[f64; 3]) -> bool {
        let ok = |v: f64, lo: Option<f64>, hi: Option<f64>| lo.is_none_or(|l| v >= l) && hi.is_none_or(|h| v <= h);
        ok(p[0], self.x_min, self.x_max) && ok(p[1], self.y_min, self.y_max) && ok(p[2], self.z_min, self.z_max)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, b: [f64; 2]) -> f64 {
    if b[0] == b[1] {
        // Consume a draw anyway so the stream does not depend on box shape.
        let _ = rng.random::<f64>();
        b[0]
    } else {
        b[0] + (b[1] - b[0]) * rng.random::<f64>()
    }
}

/// `k` i.i.d. uniform positions inside the scenario box.
pub fn sample_positions<R: Rng + ?Sized>(
    scenario: &ScenarioDef,
    cell: &CellExtent,
    k: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>, MobilityError> {
    let region = scenario.region(cell)?;
    Ok((0..k)
        .map(|_| {
            let x = uniform(rng, region.x);
            let y = uniform(rng, region.y);
            let z = uniform(rng, region.z);
            [x, y, z]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicSchedule {
    pub period_steps: u64,
    pub scenario_cycle: Vec<String>,
}

impl PeriodicSchedule {
    pub fn validate(&self) -> Result<(), MobilityError> {
        if self.period_steps == 0 {
            return Err(MobilityError::InvalidSchedule("period_steps must be at least 1".into()));
        }
        if self.scenario_cycle.is_empty() {
            return Err(MobilityError::InvalidSchedule("scenario_cycle is empty".into()));
        }
        Ok(())
    }

    pub fn cycle_index_at(&self, t: u64) -> usize {
        ((t / self.period_steps) % self.scenario_cycle.len() as u64) as usize
    }

    pub fn scenario_at(&self, t: u64) -> &str {
        &self.scenario_cycle[self.cycle_index_at(t)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSchedule {
    /// Scenario id of each chain state, in matrix order.
    pub states: Vec<String>,
    /// Row-stochastic: `transition[i][j]` = P(next = j | current = i).
    pub transition: Vec<Vec<f64>>,
    pub initial: String,
}

impl MarkovSchedule {
    pub fn validate(&self) -> Result<(), MobilityError> {
        let n = self.states.len();
        if n == 0 {
            return Err(MobilityError::InvalidSchedule("markov chain has no states".into()));
        }
        if self.transition.len() != n {
            return Err(MobilityError::InvalidSchedule(format!("transition has {} rows for {n} states", self.transition.len())));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(MobilityError::InvalidSchedule(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(MobilityError::InvalidSchedule(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(MobilityError::InvalidSchedule(format!("row {i} sums to {sum}")));
            }
        }
        self.initial_state()?;
        Ok(())
    }

    pub fn initial_state(&self) -> Result<usize, MobilityError> {
        self.states
            .iter()
            .position(|s| *s == self.initial)
            .ok_or_else(|| MobilityError::UnknownScenario(self.initial.clone()))
    }

    /// Draw the successor of `current` from its transition row.
    pub fn advance<R: Rng + ?Sized>(&self, current: usize, rng: &mut R) -> Result<usize, MobilityError> {
        let row = self
            .transition
            .get(current)
            .ok_or(MobilityError::StateIndex { state: current, n: self.states.len() })?;
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut last_positive = current;
        for (j, p) in row.iter().enumerate() {
            if *p > 0.0 {
                last_positive = j;
            }
            acc += p;
            if u < acc {
                return Ok(j);
            }
        }
        // Rounding left a sliver above the cumulative sum.
        Ok(last_positive)
    }
}

/// Scenario switching rule of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Periodic(PeriodicSchedule),
    Markov(MarkovSchedule),
}

impl Schedule {
    pub fn validate(&self) -> Result<(), MobilityError> {
        match self {
            Schedule::Periodic(p) => p.validate(),
            Schedule::Markov(m) => m.validate(),
        }
    }

    /// Every scenario id the schedule can emit.
    pub fn scenario_ids(&self) -> &[String] {
        match self {
            Schedule::Periodic(p) => &p.scenario_cycle,
            Schedule::Markov(m) => &m.states,
        }
    }
}

/// Sequential driver over a [`Schedule`]; yields one scenario id per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    schedule: Schedule,
    step: u64,
    state: usize,
}

impl Scheduler {
    pub fn new(schedule: Schedule) -> Result<Self, MobilityError> {
        schedule.validate()?;
        let state = match &schedule {
            Schedule::Periodic(_) => 0,
            Schedule::Markov(m) => m.initial_state()?,
        };
        Ok(Self { schedule, step: 0, state })
    }

    /// Scenario id for the current step, then move to the next step.
    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<String, MobilityError> {
        let id = match &self.schedule {
            Schedule::Periodic(p) => p.scenario_at(self.step).to_string(),
            Schedule::Markov(m) => {
                if self.step > 0 {
                    self.state = m.advance(self.state, rng)?;
                }
                m.states[self.state].clone()
            }
        };
        self.step += 1;
        Ok(id)
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}
