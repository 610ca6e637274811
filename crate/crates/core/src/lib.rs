//! Deterministic simulator for auction-based clustered federated learning.
//!
//! Clients hold Non-IID, size-imbalanced data. The server clusters them by
//! gradient probes taken at the initial model, then each round picks
//! trainers per cluster (uniformly, or through a first-price sealed-bid
//! reverse auction with equilibrium bids), aggregates their local models,
//! and tracks accuracy, energy balance, and payments.

pub mod clustering;
pub mod datasets;
pub mod economics;
pub mod energy;
pub mod error;
pub mod federation;
pub mod lab;
pub mod models;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
