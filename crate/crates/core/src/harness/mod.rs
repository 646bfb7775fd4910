//! Experiment orchestration: configuration, the offline training loop,
//! evaluation of trained agents, dataset generation and artifact files.
//!
//! Step `t` of a run:
//! 1. the environment yields snapshot `S_t` (mobility and channel);
//! 2. the state `s_t` stacks the newest connection vectors, the newest
//!    being `S_t` served by the previous step's beams;
//! 3. the previous transition `(s_{t-1}, a_{t-1}, r_{t-1}, s_t)` is stored
//!    and learned from;
//! 4. the agent picks `a_t`, and `r_t` is the connected-UE count of `S_t`
//!    under `a_t`, scored against the oracle optimum of `S_t`.

mod config;
pub(crate) mod env;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ChannelConfig, ExperimentConfig, Resample, SectorConfig, TrainingConfig, UeOrder};
pub use env::{stream_rng, EnvState, Environment, SnapshotEntry};

use crate::array_beams::{BeamError, BeamPool};
use crate::channel::{write_raytrace, ChannelError, ScenarioSnapshot};
use crate::coverage::{encode_state, BeamAssignment, ConnectionState, CoverageError, StateTensor};
use crate::dqn_agent::{AgentError, DqnAgent};
use crate::metrics::{read_trace, windowed, write_metrics, MetricsError, StepRecord, TraceWindow, TraceWriter, WindowMetrics};
use crate::neural::checkpoint::{Checkpoint, CheckpointError};
use crate::neural::NeuralError;
use crate::oracle::{OracleError, ORACLE_TRACE_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// File names inside a run directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ERROR_FILE: &str = "error.json";
pub const EVAL_TRACE_FILE: &str = "eval_trace.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";

const AGENT_PREFIX: &str = "agent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Pending {
    state: StateTensor,
    actions: Vec<usize>,
    reward: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LoopState {
    step: u64,
    prev_actions: Vec<usize>,
    history: Vec<ConnectionState>,
    pending: Option<Pending>,
    agent_word_pos: String,
    env: EnvState,
}

/// The per-step driver shared by training and its tests.
pub struct Session {
    config: ExperimentConfig,
    env: Environment,
    agent: DqnAgent,
    rng: ChaCha8Rng,
    history: Vec<ConnectionState>,
    prev_actions: Vec<usize>,
    pending: Option<Pending>,
    step: u64,
    learn: bool,
}

impl Session {
    pub fn new(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let env = Environment::new(config)?;
        let mut rng = stream_rng(config.seed, env::AGENT_STREAM);
        let sizes: Vec<usize> = env.pools().iter().map(BeamPool::len).collect();
        let agent = DqnAgent::new(config.input_shape(), &sizes, config.agent.clone(), &mut rng)?;
        Ok(Self::assemble(config, env, agent, rng, true))
    }

    fn assemble(config: &ExperimentConfig, env: Environment, agent: DqnAgent, rng: ChaCha8Rng, learn: bool) -> Self {
        Self {
            config: config.clone(),
            prev_actions: vec![0; config.sectors.len()],
            env,
            agent,
            rng,
            history: Vec::new(),
            pending: None,
            step: 0,
            learn,
        }
    }

    /// Resume training exactly where `ck` was written.
    pub fn resume(config: &ExperimentConfig, ck: &Checkpoint) -> Result<Self, HarnessError> {
        let agent = load_agent(config, ck)?;
        let state: LoopState = serde_json::from_value(
            ck.meta.get("run").cloned().ok_or_else(|| CheckpointError::MissingSection("run".into()))?,
        )?;
        let mut env = Environment::new(config)?;
        env.restore(state.env)?;
        let mut rng = stream_rng(config.seed, env::AGENT_STREAM);
        let pos: u128 = state
            .agent_word_pos
            .parse()
            .map_err(|_| CheckpointError::Header("agent generator position".into()))?;
        rng.set_word_pos(pos);
        let mut s = Self::assemble(config, env, agent, rng, true);
        s.history = state.history;
        s.prev_actions = state.prev_actions;
        s.pending = state.pending;
        s.step = state.step;
        Ok(s)
    }

    /// Greedy, non-learning rollout of a trained agent on fresh draws.
    pub fn evaluation(config: &ExperimentConfig, agent: DqnAgent) -> Result<Self, HarnessError> {
        let env = Environment::for_eval(config)?;
        let rng = stream_rng(config.seed, env::EVAL_AGENT_STREAM);
        Ok(Self::assemble(config, env, agent, rng, false))
    }

    pub fn agent(&self) -> &DqnAgent {
        &self.agent
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn advance(&mut self) -> Result<(StepRecord, Arc<SnapshotEntry>), HarnessError> {
        let entry = self.env.advance()?;
        let radio = *self.env.radio();
        let observed = entry.table.evaluate(&BeamAssignment(self.prev_actions.clone()), &radio)?.connection;
        self.history.push(observed);
        if self.history.len() > crate::coverage::STACKED_FRAMES {
            self.history.remove(0);
        }
        let state = encode_state(&self.history, self.config.frame_cols);
        let (epsilon, actions) = if self.learn {
            if let Some(p) = self.pending.take() {
                self.agent.train_step(&p.state, &p.actions, p.reward, &state, &mut self.rng)?;
            }
            let eps = self.agent.epsilon();
            (eps, self.agent.act_with_epsilon(&state, eps, &mut self.rng)?)
        } else {
            (0.0, self.agent.greedy(&state)?)
        };
        let reward = entry.table.evaluate(&BeamAssignment(actions.clone()), &radio)?.connected_count;
        let record = StepRecord {
            step: self.step,
            scenario_id: entry.snapshot.scenario_id.clone(),
            epsilon,
            actions: BeamAssignment(actions.clone()),
            reward,
            oracle_reward: entry.oracle.best_reward,
            oracle_actions: entry.oracle.best_assignment.clone(),
        };
        if self.learn {
            self.pending = Some(Pending { state, actions: actions.clone(), reward });
        }
        self.prev_actions = actions;
        self.step += 1;
        Ok((record, entry))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, HarnessError> {
        let mut ck = Checkpoint::new();
        self.agent.save_into(&mut ck, AGENT_PREFIX);
        let state = LoopState {
            step: self.step,
            prev_actions: self.prev_actions.clone(),
            history: self.history.clone(),
            pending: self.pending.clone(),
            agent_word_pos: self.rng.get_word_pos().to_string(),
            env: self.env.state(),
        };
        ck.meta.insert("run".into(), serde_json::to_value(state)?);
        ck.meta.insert("seed".into(), serde_json::Value::from(self.config.seed));
        ck.meta.insert("input_shape".into(), serde_json::to_value(self.config.input_shape())?);
        Ok(ck)
    }
}

/// Load the agent stored in `ck`, checking it against `config`.
pub fn load_agent(config: &ExperimentConfig, ck: &Checkpoint) -> Result<DqnAgent, HarnessError> {
    let agent = DqnAgent::load_from(ck, AGENT_PREFIX, config.agent.clone())?;
    let sizes: Vec<usize> = config.pools()?.iter().map(BeamPool::len).collect();
    let got: Vec<usize> = agent.learners().iter().map(|l| l.n_actions()).collect();
    let shape_ok = agent.learners().iter().all(|l| l.eval.input_shape() == config.input_shape());
    if got != sizes || !shape_ok {
        return Err(NeuralError::ArchitectureMismatch(format!(
            "checkpoint has pools {got:?} on input {:?}; config expects pools {sizes:?} on input {:?}",
            agent.learners().first().map(|l| l.eval.input_shape()),
            config.input_shape()
        ))
        .into());
    }
    Ok(agent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub converged: bool,
    pub final_epsilon: Option<f64>,
    pub windows: usize,
    pub final_window: Option<WindowMetrics>,
    /// Every step of the final window had a unique oracle optimum.
    pub final_window_oracle_unique: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub records: Vec<StepRecord>,
    pub windows: Vec<WindowMetrics>,
    pub summary: RunSummary,
}

impl RunArtifacts {
    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Original config text, used to list defaulted keys in the resolved dump.
    pub user_config_text: Option<&'a str>,
    pub resume: Option<&'a Path>,
    /// Called after every step.
    pub progress: Option<&'a mut dyn FnMut(&StepRecord)>,
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| HarnessError::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Write the fully materialized config, listing defaulted keys up front.
pub fn write_resolved_config(config: &ExperimentConfig, user_text: Option<&str>, path: &Path) -> Result<(), HarnessError> {
    let mut text = String::new();
    if let Some(user) = user_text {
        let keys = config.defaulted_keys(user)?;
        if !keys.is_empty() {
            text.push_str("# Keys filled from built-in defaults (reference = published parameter, chosen = implementation default):\n");
            for k in keys {
                text.push_str(&format!("#   {k} [{}]\n", config::default_source(&k)));
            }
            text.push('\n');
        }
    }
    text.push_str(&config.to_toml()?);
    write_text(path, &text)
}

/// Offline training: run the configured number of steps, writing the trace,
/// windowed metrics, oracle trace, checkpoint and summary into `out_dir`.
/// A failure leaves whatever was written plus an error record.
pub fn run_offline_training(config: &ExperimentConfig, out_dir: &Path, opts: TrainOptions<'_>) -> Result<RunArtifacts, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let _ = std::fs::remove_file(out_dir.join(ERROR_FILE));
    write_resolved_config(config, opts.user_config_text, &out_dir.join(RESOLVED_CONFIG_FILE))?;
    let mut last_step = None;
    let result = train_loop(config, out_dir, opts, &mut last_step);
    if let Err(e) = &result {
        let record = serde_json::json!({ "error": e.to_string(), "config_error": e.is_config(), "step": last_step });
        let _ = std::fs::write(out_dir.join(ERROR_FILE), serde_json::to_string_pretty(&record).unwrap_or_default());
    }
    result
}

fn train_loop(
    config: &ExperimentConfig,
    out_dir: &Path,
    mut opts: TrainOptions<'_>,
    last_step: &mut Option<u64>,
) -> Result<RunArtifacts, HarnessError> {
    let total = config.training.total_steps();
    let window = config.training.metrics_window;
    let trace_path = out_dir.join(TRACE_FILE);
    let oracle_path = out_dir.join(ORACLE_FILE);
    let ck_path = out_dir.join(CHECKPOINT_FILE);

    let (mut session, mut records) = match opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let session = Session::resume(config, &ck)?;
            let start = session.step_index();
            let earlier = match File::open(&trace_path) {
                Ok(f) => read_trace(std::io::BufReader::new(f))?.into_iter().filter(|r| r.step < start).collect(),
                Err(_) => Vec::new(),
            };
            (session, earlier)
        }
        None => (Session::new(config)?, Vec::new()),
    };
    let mut oracle_rows: Vec<String> = Vec::new();
    let mut unique: Vec<bool> = Vec::new();
    {
        let mut trace = TraceWriter::new(create(&trace_path)?)?;
        for r in &records {
            trace.write(r)?;
        }
        let mut oracle_out = create(&oracle_path)?;
        writeln!(oracle_out, "{ORACLE_TRACE_HEADER},n_optimal").map_err(|e| HarnessError::io(&oracle_path, e))?;

        let mut converged_early = false;
        while session.step_index() < total && !converged_early {
            *last_step = Some(session.step_index());
            let (record, entry) = session.advance()?;
            trace.write(&record)?;
            let row = format!(
                "{},{},{},{},{}",
                record.step, record.scenario_id, entry.oracle.best_assignment, entry.oracle.best_reward, entry.n_optimal
            );
            writeln!(oracle_out, "{row}").map_err(|e| HarnessError::io(&oracle_path, e))?;
            oracle_rows.push(row);
            unique.push(entry.n_optimal == 1);
            if let Some(cb) = opts.progress.as_mut() {
                cb(&record);
            }
            records.push(record);
            let done = session.step_index();
            let every = config.training.checkpoint_every_steps;
            if every > 0 && done % every == 0 && done < total {
                trace.flush()?;
                session.checkpoint()?.save(&ck_path)?;
            }
            if config.training.stop_on_convergence && records.len() >= window && done % window as u64 == 0 {
                let w = TraceWindow::from_records(&records[records.len() - window..])?;
                converged_early = WindowMetrics::of(done - window as u64, &w).converged();
            }
        }
        trace.flush()?;
        oracle_out.flush().map_err(|e| HarnessError::io(&oracle_path, e))?;
    }
    *last_step = None;

    let windows = windowed(&records, window)?;
    let n_sectors = config.sectors.len();
    write_metrics(create(&out_dir.join(METRICS_FILE))?, &windows, n_sectors)?;
    if session.step_index() > 0 {
        session.checkpoint()?.save(&ck_path)?;
    }
    let final_window = windows.last().cloned();
    let summary = RunSummary {
        steps: session.step_index(),
        converged: final_window.as_ref().is_some_and(WindowMetrics::converged),
        final_epsilon: records.last().map(|r| r.epsilon),
        windows: windows.len(),
        final_window_oracle_unique: final_window.as_ref().and_then(|_| {
            let n = records.len() / window * window;
            // Uniqueness flags exist only for steps run in this process.
            let first_here = records.len() - unique.len();
            (n - window >= first_here).then(|| unique[n - window - first_here..n - first_here].iter().all(|u| *u))
        }),
        final_window,
    };
    write_text(&out_dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary)?)?;
    Ok(RunArtifacts { out_dir: out_dir.to_path_buf(), records, windows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub steps: u64,
    pub asd: f64,
    pub am_joint: f64,
    pub am_sector: Vec<f64>,
    pub reward_eq_am_sector: Vec<f64>,
}

/// Greedy rollout of the agent in `checkpoint` on fresh evaluation draws.
pub fn run_eval(config: &ExperimentConfig, checkpoint: &Path, steps: u64, out_dir: Option<&Path>) -> Result<(EvalReport, Vec<StepRecord>), HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let agent = load_agent(config, &ck)?;
    let mut session = Session::evaluation(config, agent)?;
    let mut records = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        records.push(session.advance()?.0);
    }
    let report = if records.is_empty() {
        EvalReport { steps: 0, asd: 0.0, am_joint: 0.0, am_sector: vec![0.0; config.sectors.len()], reward_eq_am_sector: vec![0.0; config.sectors.len()] }
    } else {
        let w = WindowMetrics::of(0, &TraceWindow::from_records(&records)?);
        EvalReport { steps, asd: w.asd, am_joint: w.am_joint, am_sector: w.am_sector, reward_eq_am_sector: w.reward_eq_am_sector }
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut trace = TraceWriter::new(create(&dir.join(EVAL_TRACE_FILE))?)?;
        for r in &records {
            trace.write(r)?;
        }
        trace.flush()?;
        let windows = windowed(&records, config.training.metrics_window)?;
        write_metrics(create(&dir.join(EVAL_METRICS_FILE))?, &windows, config.sectors.len())?;
        write_text(&dir.join("eval_summary.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok((report, records))
}

/// Snapshots the training environment would present over `horizon` steps,
/// timestamped by step, in the ray-trace file format.
pub fn gen_dataset(config: &ExperimentConfig, out: &Path, horizon: u64) -> Result<Vec<ScenarioSnapshot>, HarnessError> {
    if !matches!(config.channel, ChannelConfig::Synthetic { .. }) {
        return Err(HarnessError::Config("gen-dataset needs a synthetic channel source".into()));
    }
    let mut env = Environment::new(config)?;
    let mut snapshots = Vec::with_capacity(horizon as usize);
    for t in 0..horizon {
        let mut s = env.advance()?.snapshot.clone();
        s.timestamp = t as i64;
        snapshots.push(s);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut sink = create(out)?;
    write_raytrace(&mut sink, &snapshots)?;
    sink.flush().map_err(|e| HarnessError::io(out, e))?;
    Ok(snapshots)
}

/// Oracle optimum per step over `horizon` steps of the training environment.
pub fn oracle_trace<W: Write>(config: &ExperimentConfig, horizon: u64, mut sink: W) -> Result<(), HarnessError> {
    let mut env = Environment::new(config)?;
    let io = |e| HarnessError::io(Path::new("<oracle trace>"), e);
    writeln!(sink, "{ORACLE_TRACE_HEADER},n_optimal").map_err(io)?;
    for t in 0..horizon {
        let e = env.advance()?;
        writeln!(sink, "{t},{},{},{},{}", e.snapshot.scenario_id, e.oracle.best_assignment, e.oracle.best_reward, e.n_optimal).map_err(io)?;
    }
    sink.flush().map_err(io)?;
    Ok(())
}

/// Recompute windowed metrics from a trace file.
pub fn metrics_from_trace(trace: &Path, window: usize) -> Result<(Vec<WindowMetrics>, usize), HarnessError> {
    let f = File::open(trace).map_err(|e| HarnessError::io(trace, e))?;
    let records = read_trace(std::io::BufReader::new(f))?;
    let n_sectors = records.first().map(|r| r.actions.len()).unwrap_or(0);
    Ok((windowed(&records, window)?, n_sectors))
}
