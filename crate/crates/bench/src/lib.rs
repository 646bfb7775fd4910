//! Shared fixtures for the kernel benchmarks.

use beamtune::harness::{stream_rng, Environment, ExperimentConfig, SnapshotEntry};
use beamtune::neural::{conv_q_layers, QNetwork};
use std::sync::Arc;

pub const SINGLE_SECTOR: &str = include_str!("../../../configs/single_sector.toml");
pub const MULTI_SECTOR: &str = include_str!("../../../configs/multi_sector.toml");

pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).expect("bundled config parses")
}

/// First snapshot of the training environment for `text`.
pub fn first_entry(text: &str) -> (ExperimentConfig, Arc<SnapshotEntry>) {
    let cfg = config(text);
    let mut env = Environment::new(&cfg).expect("environment builds");
    let entry = env.advance().expect("first step");
    (cfg, entry)
}

/// Default convolutional Q-network for `cfg`, with a deterministic input.
pub fn q_network(cfg: &ExperimentConfig, n_actions: usize) -> (QNetwork, Vec<f64>) {
    let mut rng = stream_rng(cfg.seed, 99);
    let net = QNetwork::new(cfg.input_shape(), conv_q_layers(n_actions), &mut rng).expect("network builds");
    let input = (0..net.input_len()).map(|i| ((i * 7919) % 3 == 0) as u8 as f64).collect();
    (net, input)
}
