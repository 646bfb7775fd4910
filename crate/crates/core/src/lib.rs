pub mod array_beams;
pub mod channel;
pub mod coverage;
pub mod mobility;
pub mod neural;
pub mod oracle;
pub mod dqn_agent;
pub mod metrics;
pub mod harness;
