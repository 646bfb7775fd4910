use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::array_beams::{realize_entries, ArrayConfig, BeamEntry, BeamPool};
use crate::channel::{SectorSite, SynthChannelParams};
use crate::coverage::RadioConstants;
use crate::dqn_agent::AgentConfig;
use crate::mobility::{CellExtent, ScenarioDef, Schedule};
use crate::oracle::{search_space, MAX_ASSIGNMENTS};

/// When synthetic UE positions and channels are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// New draw whenever the scenario id changes; held while it persists.
    #[default]
    OnChange,
    /// New draw every step.
    PerStep,
    /// One draw per scenario id for the whole run.
    Fixed,
}

/// How synthetic UE indices are assigned to sampled positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UeOrder {
    /// Index follows draw order.
    #[default]
    Sampled,
    /// Indices sorted by ascending x.
    ByX,
    /// Indices sorted by ascending y.
    ByY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelConfig {
    /// Geometry-driven synthetic paths for scenario-sampled UEs.
    Synthetic {
        #[serde(default)]
        params: SynthChannelParams,
    },
    /// Pre-computed multipath snapshots; step `t` uses snapshot `t mod len`.
    Raytrace { path: PathBuf },
    /// Time-stamped UE positions; step `t` uses frame `t mod len` with
    /// synthetic paths.
    Locations {
        path: PathBuf,
        #[serde(default)]
        params: SynthChannelParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorConfig {
    /// Ground-plane position `(x, y)`; the array sits at the configured height.
    pub position: [f64; 2],
    #[serde(default)]
    pub boresight_az_deg: f64,
    pub beams: Vec<BeamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub episodes: u64,
    pub steps_per_episode: u64,
    /// Steps per metrics window.
    pub metrics_window: usize,
    pub resample: Resample,
    pub ue_order: UeOrder,
    /// End training at the first window with zero strict action mismatch.
    pub stop_on_convergence: bool,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every_steps: u64,
    /// Greedy rollout length for evaluation.
    pub eval_steps: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            episodes: 250,
            steps_per_episode: 200,
            metrics_window: 200,
            resample: Resample::OnChange,
            ue_order: UeOrder::Sampled,
            stop_on_convergence: false,
            checkpoint_every_steps: 0,
            eval_steps: 1000,
        }
    }
}

impl TrainingConfig {
    pub fn total_steps(&self) -> u64 {
        self.episodes.saturating_mul(self.steps_per_episode)
    }
}

fn default_seed() -> u64 {
    1
}

fn default_frame_cols() -> usize {
    25
}

/// Everything one experiment needs; `seed` plus this fully determine a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Number of UEs K.
    pub n_ues: usize,
    /// Columns per state frame; rows follow from K.
    #[serde(default = "default_frame_cols")]
    pub frame_cols: usize,
    #[serde(default)]
    pub array: ArrayConfig,
    #[serde(default)]
    pub radio: RadioConstants,
    pub sectors: Vec<SectorConfig>,
    pub cell: CellExtent,
    #[serde(default)]
    pub scenarios: Vec<ScenarioDef>,
    pub schedule: Schedule,
    pub channel: ChannelConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.channel {
            ChannelConfig::Raytrace { path } | ChannelConfig::Locations { path, .. } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Dotted keys present in the resolved config but absent from `user_text`.
    pub fn defaulted_keys(&self, user_text: &str) -> Result<Vec<String>, HarnessError> {
        let user: toml::Table = toml::from_str(user_text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let resolved: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut out = Vec::new();
        missing_keys(&resolved, &user, "", &mut out);
        Ok(out)
    }

    pub fn sites(&self) -> Vec<SectorSite> {
        self.sectors
            .iter()
            .map(|s| SectorSite { position: [s.position[0], s.position[1], self.array.height_m], boresight_az_deg: s.boresight_az_deg })
            .collect()
    }

    pub fn pools(&self) -> Result<Vec<BeamPool>, HarnessError> {
        self.sectors
            .iter()
            .enumerate()
            .map(|(m, s)| realize_entries(&self.array, &s.beams).map_err(|e| HarnessError::Config(format!("sector {m}: {e}"))))
            .collect()
    }

    pub fn state_rows(&self) -> usize {
        self.n_ues.div_ceil(self.frame_cols).max(1)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [crate::coverage::STACKED_FRAMES, self.state_rows(), self.frame_cols]
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must not exceed {}", i64::MAX));
        }
        if self.n_ues == 0 {
            return bad("n_ues must be positive".into());
        }
        if self.frame_cols == 0 {
            return bad("frame_cols must be positive".into());
        }
        if self.sectors.is_empty() {
            return bad("at least one sector is required".into());
        }
        self.array.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.radio.noise_power_dbm.is_finite() && self.radio.sinr_threshold_db.is_finite()) {
            return bad("radio constants must be finite".into());
        }
        for (m, s) in self.sectors.iter().enumerate() {
            if s.beams.is_empty() {
                return bad(format!("sector {m} has an empty beam pool"));
            }
        }
        let pools = self.pools()?;
        let space = search_space(&pools.iter().map(BeamPool::len).collect::<Vec<_>>());
        if space > MAX_ASSIGNMENTS {
            return bad(format!("joint search space {space} exceeds the oracle budget {MAX_ASSIGNMENTS}"));
        }
        for (name, b) in [("x", self.cell.x), ("y", self.cell.y), ("z", self.cell.z)] {
            if !(b[0] <= b[1]) {
                return bad(format!("cell {name} range is empty"));
            }
        }
        let mut ids = BTreeSet::new();
        for s in &self.scenarios {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate scenario id {:?}", s.id));
            }
            s.region(&self.cell).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.schedule.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        match &self.channel {
            ChannelConfig::Synthetic { params } => {
                params.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
                for id in self.schedule.scenario_ids() {
                    if !ids.contains(id.as_str()) {
                        return bad(format!("schedule names undefined scenario {id:?}"));
                    }
                }
            }
            ChannelConfig::Locations { params, .. } => params.validate().map_err(|e| HarnessError::Config(e.to_string()))?,
            ChannelConfig::Raytrace { .. } => {}
        }
        self.agent.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let t = &self.training;
        if t.steps_per_episode == 0 || t.metrics_window == 0 {
            return bad("steps_per_episode and metrics_window must be positive".into());
        }
        Ok(())
    }
}

fn missing_keys(resolved: &toml::Table, user: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    let empty = toml::Table::new();
    for (k, v) in resolved {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, user.get(k)) {
            (toml::Value::Table(r), None) => missing_keys(r, &empty, &path, out),
            (toml::Value::Table(r), Some(toml::Value::Table(u))) => missing_keys(r, u, &path, out),
            (_, None) => out.push(path),
            _ => {}
        }
    }
}

/// Defaults taken from the method's published parameter table; every other
/// default is an implementation choice.
const REFERENCE_DEFAULTS: &[&str] = &[
    "agent.gamma",
    "agent.optimizer.learning_rate",
    "agent.epsilon.eps_max",
    "agent.epsilon.eps_min",
    "agent.batch_size",
    "array.n_elev",
    "array.n_az",
    "array.d_elev",
    "array.d_az",
    "array.height_m",
    "radio.sinr_threshold_db",
];

/// Where a defaulted key's value comes from: `reference` or `chosen`.
pub fn default_source(key: &str) -> &'static str {
    if REFERENCE_DEFAULTS.contains(&key) {
        "reference"
    } else {
        "chosen"
    }
}
