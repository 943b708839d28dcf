//! Continual spatio-temporal forecasting under data drift.
//!
//! The toolkit trains a compact graph forecaster interval by interval on an
//! evolving network. Each interval transition it scores persisting nodes with
//! a Relation Importance metric, trains on the informative subgraph plus
//! simulated data for newly appeared nodes, replays the most influential
//! timestamps from a fixed-capacity memory buffer, and consolidates learned
//! parameters with Fisher-weighted quadratic penalties.

pub mod dataset;
pub mod distrib;
pub mod error;
pub mod eval;
pub mod graph;
pub mod influence;
pub mod model;
pub mod ri;
pub mod scalar;
pub mod softri;
pub mod synth;
pub mod trainer;

mod rngutil;

pub use error::{Error, Result};
