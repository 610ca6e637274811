//! Config-driven runner for the acfl simulator.
//!
//! Configs are TOML documents whose sections mirror
//! [`acfl::federation::ExperimentConfig`]; every key is optional and
//! missing keys take the simulator defaults.

pub mod commands;
pub mod config;

pub use config::{apply_override, parse_config, parse_config_str, to_toml};
