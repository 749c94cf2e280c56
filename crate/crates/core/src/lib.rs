//! Finding energy-efficient interrupt-coalescing and CPU-frequency settings
//! for latency-sensitive network servers under a tail-latency SLA.
//!
//! * [`domain`]: knob types, the configuration grid, SLA and percentiles.
//! * [`model`]: analytic per-request latency/energy model and its fitting.
//! * [`sim`]: discrete-event server simulator, sweeps and Pareto filtering.
//! * [`bayesopt`]: SLA-aware penalty, GP surrogate and the trial loop.
//! * [`controller`]: the live tune/settle loop over a system under control.
//! * [`trace`]: diurnal trace ingestion, binning, scaling and replay.

pub mod bayesopt;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod controller;
pub mod model;
pub mod seed;
pub mod sim;
pub mod trace;

pub use domain::{enumerate_grid, meets_sla, nearest_rank_percentile, Config, ConfigSpace, FrequencyGHz, ItrDelayMicros, Measurement, SlaObjective};
pub use error::{Error, Result};
