use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ChannelConfig, ExperimentConfig, Resample, UeOrder};
use super::HarnessError;
use crate::array_beams::{ArrayConfig, BeamPool};
use crate::channel::{load_location_history, load_raytrace, synth_links, LocationHistory, ScenarioSnapshot, SectorSite, SynthChannelParams};
use crate::coverage::{PowerTable, RadioConstants};
use crate::mobility::{sample_positions, CellExtent, ScenarioDef, Scheduler};
use crate::oracle::{exhaustive_best_table, OracleResult};

/// Generator streams carved out of the master seed.
pub const AGENT_STREAM: u64 = 1;
pub const SCHEDULE_STREAM: u64 = 2;
pub const EVAL_AGENT_STREAM: u64 = 3;
pub const EVAL_SCHEDULE_STREAM: u64 = 4;
const SNAPSHOT_STREAM_BASE: u64 = 1 << 32;
/// Offset applied to snapshot streams of evaluation rollouts so they see
/// fresh UE draws.
pub const EVAL_SNAPSHOT_OFFSET: u64 = 1 << 48;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A snapshot with its per-beam power table and oracle optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub snapshot: ScenarioSnapshot,
    pub table: PowerTable,
    pub oracle: OracleResult,
    /// Number of assignments attaining the oracle reward.
    pub n_optimal: usize,
}

impl SnapshotEntry {
    pub fn build(
        array: &ArrayConfig,
        pools: &[BeamPool],
        radio: &RadioConstants,
        snapshot: ScenarioSnapshot,
    ) -> Result<Self, HarnessError> {
        let table = PowerTable::build(array, &snapshot, pools)?;
        let mut oracle = exhaustive_best_table(&table, radio, true)?;
        let n_optimal = oracle
            .per_assignment_rewards
            .take()
            .map(|m| m.values().filter(|r| **r == oracle.best_reward).count())
            .unwrap_or(1);
        Ok(Self { snapshot, table, oracle, n_optimal })
    }
}

enum Source {
    Synthetic {
        params: SynthChannelParams,
        scenarios: BTreeMap<String, (usize, ScenarioDef)>,
        cell: CellExtent,
        resample: Resample,
        fixed: BTreeMap<String, Arc<SnapshotEntry>>,
    },
    Dataset {
        snapshots: Vec<ScenarioSnapshot>,
        cache: Vec<Option<Arc<SnapshotEntry>>>,
    },
    Locations {
        history: LocationHistory,
        params: SynthChannelParams,
        scenarios: Vec<ScenarioDef>,
        cache: Vec<Option<Arc<SnapshotEntry>>>,
    },
}

/// Resumable position of an [`Environment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub step: u64,
    pub scheduler: Scheduler,
    pub last_scenario: Option<String>,
    pub draws: u64,
    /// Timestamp of the snapshot held across steps, if any.
    pub held_timestamp: Option<i64>,
    /// Word position of the schedule generator.
    pub schedule_word_pos: String,
}

/// Produces one scenario snapshot per step together with its cached power
/// table and oracle result.
pub struct Environment {
    seed: u64,
    snapshot_offset: u64,
    array: ArrayConfig,
    radio: RadioConstants,
    sites: Vec<SectorSite>,
    pools: Vec<BeamPool>,
    n_ues: usize,
    ue_order: UeOrder,
    source: Source,
    scheduler: Scheduler,
    schedule_rng: ChaCha8Rng,
    last_scenario: Option<String>,
    draws: u64,
    current: Option<Arc<SnapshotEntry>>,
    step: u64,
}

impl Environment {
    /// Training environment for `config`.
    pub fn new(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        Self::with_streams(config, SCHEDULE_STREAM, 0)
    }

    /// Evaluation environment: independent schedule and UE draws.
    pub fn for_eval(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        Self::with_streams(config, EVAL_SCHEDULE_STREAM, EVAL_SNAPSHOT_OFFSET)
    }

    fn with_streams(config: &ExperimentConfig, schedule_stream: u64, snapshot_offset: u64) -> Result<Self, HarnessError> {
        config.validate()?;
        let m = config.sectors.len();
        let source = match &config.channel {
            ChannelConfig::Synthetic { params } => Source::Synthetic {
                params: *params,
                scenarios: config.scenarios.iter().enumerate().map(|(i, s)| (s.id.clone(), (i, s.clone()))).collect(),
                cell: config.cell,
                resample: config.training.resample,
                fixed: BTreeMap::new(),
            },
            ChannelConfig::Raytrace { path } => {
                let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
                let snapshots = load_raytrace(std::io::BufReader::new(file), m, config.n_ues)?;
                let cache = vec![None; snapshots.len()];
                Source::Dataset { snapshots, cache }
            }
            ChannelConfig::Locations { path, params } => {
                let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
                let history = load_location_history(std::io::BufReader::new(file))?;
                if history.frames.is_empty() {
                    return Err(HarnessError::Config(format!("{}: no location frames", path.display())));
                }
                if let Some((ts, f)) = history.frames.iter().find(|(_, f)| f.len() != config.n_ues) {
                    return Err(HarnessError::Config(format!("frame {ts} has {} UEs, config expects {}", f.len(), config.n_ues)));
                }
                let cache = vec![None; history.frames.len()];
                Source::Locations { history, params: *params, scenarios: config.scenarios.clone(), cache }
            }
        };
        Ok(Self {
            seed: config.seed,
            snapshot_offset,
            array: config.array,
            radio: config.radio,
            sites: config.sites(),
            pools: config.pools()?,
            n_ues: config.n_ues,
            ue_order: config.training.ue_order,
            source,
            scheduler: Scheduler::new(config.schedule.clone()).map_err(|e| HarnessError::Config(e.to_string()))?,
            schedule_rng: stream_rng(config.seed, schedule_stream),
            last_scenario: None,
            draws: 0,
            current: None,
            step: 0,
        })
    }

    pub fn pools(&self) -> &[BeamPool] {
        &self.pools
    }

    pub fn radio(&self) -> &RadioConstants {
        &self.radio
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn snapshot_rng(&self, index: u64) -> ChaCha8Rng {
        stream_rng(self.seed, SNAPSHOT_STREAM_BASE + self.snapshot_offset + index)
    }

    fn synth_entry(&self, scenario: &ScenarioDef, cell: &CellExtent, params: &SynthChannelParams, stream: u64, timestamp: i64) -> Result<SnapshotEntry, HarnessError> {
        let mut rng = self.snapshot_rng(stream);
        let mut positions = sample_positions(scenario, cell, self.n_ues, &mut rng).map_err(|e| HarnessError::Config(e.to_string()))?;
        match self.ue_order {
            UeOrder::Sampled => {}
            UeOrder::ByX => positions.sort_by(|a, b| a[0].total_cmp(&b[0])),
            UeOrder::ByY => positions.sort_by(|a, b| a[1].total_cmp(&b[1])),
        }
        let links = synth_links(&self.sites, &positions, params, &mut rng)?;
        let snapshot = ScenarioSnapshot::new(timestamp, scenario.id.clone(), positions, self.sites.len(), links)?;
        SnapshotEntry::build(&self.array, &self.pools, &self.radio, snapshot)
    }

    /// Snapshot for the next step.
    pub fn advance(&mut self) -> Result<Arc<SnapshotEntry>, HarnessError> {
        let t = self.step;
        let scenario_id = self.scheduler.next(&mut self.schedule_rng).map_err(|e| HarnessError::Config(e.to_string()))?;
        let entry = match &self.source {
            Source::Synthetic { params, scenarios, cell, resample, fixed } => {
                let (index, def) = scenarios
                    .get(&scenario_id)
                    .ok_or_else(|| HarnessError::Config(format!("unknown scenario {scenario_id:?}")))?;
                match resample {
                    Resample::Fixed => match fixed.get(&scenario_id) {
                        Some(e) => e.clone(),
                        None => {
                            let e = Arc::new(self.synth_entry(def, cell, params, *index as u64, 0)?);
                            if let Source::Synthetic { fixed, .. } = &mut self.source {
                                fixed.insert(scenario_id.clone(), e.clone());
                            }
                            e
                        }
                    },
                    Resample::OnChange | Resample::PerStep => {
                        let redraw = *resample == Resample::PerStep
                            || self.current.is_none()
                            || self.last_scenario.as_deref() != Some(scenario_id.as_str());
                        if redraw {
                            let e = Arc::new(self.synth_entry(def, cell, params, self.draws, t as i64)?);
                            self.draws += 1;
                            e
                        } else {
                            self.current.clone().expect("checked above")
                        }
                    }
                }
            }
            Source::Dataset { snapshots, cache } => {
                let i = (t % snapshots.len() as u64) as usize;
                match &cache[i] {
                    Some(e) => e.clone(),
                    None => {
                        let e = Arc::new(SnapshotEntry::build(&self.array, &self.pools, &self.radio, snapshots[i].clone())?);
                        if let Source::Dataset { cache, .. } = &mut self.source {
                            cache[i] = Some(e.clone());
                        }
                        e
                    }
                }
            }
            Source::Locations { history, params, scenarios, cache } => {
                let i = (t % history.frames.len() as u64) as usize;
                match &cache[i] {
                    Some(e) => e.clone(),
                    None => {
                        let (ts, positions) = &history.frames[i];
                        let label = majority_scenario(scenarios, positions);
                        let mut rng = self.snapshot_rng(i as u64);
                        let links = synth_links(&self.sites, positions, params, &mut rng)?;
                        let snapshot = ScenarioSnapshot::new(*ts, label, positions.clone(), self.sites.len(), links)?;
                        let e = Arc::new(SnapshotEntry::build(&self.array, &self.pools, &self.radio, snapshot)?);
                        if let Source::Locations { cache, .. } = &mut self.source {
                            cache[i] = Some(e.clone());
                        }
                        e
                    }
                }
            }
        };
        self.last_scenario = Some(entry.snapshot.scenario_id.clone());
        self.current = Some(entry.clone());
        self.step += 1;
        Ok(entry)
    }

    pub fn state(&self) -> EnvState {
        EnvState {
            step: self.step,
            scheduler: self.scheduler.clone(),
            last_scenario: self.last_scenario.clone(),
            draws: self.draws,
            held_timestamp: self.current.as_ref().map(|e| e.snapshot.timestamp),
            schedule_word_pos: self.schedule_rng.get_word_pos().to_string(),
        }
    }

    /// Restore a position captured by [`Self::state`] on an environment
    /// built from the same config.
    pub fn restore(&mut self, state: EnvState) -> Result<(), HarnessError> {
        let pos: u128 = state
            .schedule_word_pos
            .parse()
            .map_err(|_| HarnessError::Config(format!("bad generator position {:?}", state.schedule_word_pos)))?;
        self.schedule_rng.set_word_pos(pos);
        self.scheduler = state.scheduler;
        self.step = state.step;
        self.last_scenario = state.last_scenario;
        self.draws = state.draws;
        self.current = None;
        // The held synthetic draw is a pure function of its stream index.
        if let (Source::Synthetic { params, scenarios, cell, resample, .. }, Some(id)) = (&self.source, &self.last_scenario) {
            if *resample == Resample::OnChange && self.draws > 0 {
                let (_, def) = scenarios.get(id).ok_or_else(|| HarnessError::Config(format!("unknown scenario {id:?}")))?;
                let e = self.synth_entry(def, cell, params, self.draws - 1, state.held_timestamp.unwrap_or(0))?;
                self.current = Some(Arc::new(e));
            }
        }
        Ok(())
    }
}

fn majority_scenario(scenarios: &[ScenarioDef], positions: &[[f64; 3]]) -> String {
    scenarios
        .iter()
        .map(|s| (positions.iter().filter(|p| s.admits(p)).count(), s))
        .filter(|(n, _)| *n * 2 > positions.len())
        .max_by_key(|(n, _)| *n)
        .map(|(_, s)| s.id.clone())
        .unwrap_or_else(|| "mixed".to_string())
}
