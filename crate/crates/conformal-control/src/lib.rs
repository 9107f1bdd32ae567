//! Online conformal prediction for time series.
//!
//! The crate centres on a neural conformal controller: a quantile predictor
//! (GRU encoders, multi-head attention fusion, monotone cumulative head)
//! trained with control-inspired losses, wrapped in a conformalization step
//! that carries a long-term coverage guarantee, and refined at inference by
//! a test-time adaptation loop that repairs quantile crossing. Four baseline
//! controllers (split conformal, NEXCP, ACI, C-PID) share the same online
//! interface, and a harness drives experiments over synthetic or CSV data
//! from a CLI.
//!
//! Start with the runnable examples in `examples/`; each one exercises a
//! major capability end to end.

pub mod autodiff;
pub mod baselines;
pub mod checks;
pub mod controller;
pub mod core;
pub mod error;
pub mod forecasters;
pub mod harness;
pub mod metrics;
pub mod ncc;
pub mod neural;

pub use crate::core::{AlphaLadder, History, Interval, QuantileLadder, StepRecord};
pub use crate::error::{Error, Result};
