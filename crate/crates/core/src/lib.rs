//! Metric similarity self-join over a simulated cluster.
//!
//! The pipeline has three phases. Each virtual node fits a per-dimension
//! exponential-family model to its shard and scores the fit with a chi-square
//! test; pivots are then drawn (uniformly, by distribution-aware stratified
//! sampling, or generated by a Gibbs chain over the node models); finally the
//! pivots are embedded into a low-dimensional target space, split into `p`
//! areas by a median-style split tree, and every object is shipped to the
//! reducers whose δ-expanded area contains it.
//!
//! Everything above the [`engine`] is a pure function of its inputs and a
//! seed, so joins are reproducible regardless of the [`Execution`] mode.

pub mod distribution;
pub mod engine;
mod error;
pub mod metrics;
pub mod par;
pub mod partition;
pub mod sampling;
pub mod special;
pub mod synth;

pub use engine::{brute_force_join, run_join, ClusterConfig, JoinReport, JoinResult, Pair};
pub use error::{Error, Result};
pub use metrics::{DataObject, Dataset, MetricKind, Payload, PayloadKind, Threshold};
pub use par::Execution;
