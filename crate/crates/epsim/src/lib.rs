//! epsim — a desk-scale planner and discrete-event simulator for
//! expert-parallel Mixture-of-Experts inference.
//!
//! Expert parallelism shards the experts of an MoE layer across ranks and
//! moves tokens to them via All-to-All collectives. Skewed routing turns the
//! hottest rank into a straggler that is throttled twice: once by compute
//! skew and once by peak network ingress/egress. This crate models that
//! coupling analytically, solves the replication + token-assignment problem
//! that removes the straggler under hiding-window constraints, and simulates
//! the dual-track pipeline that keeps prediction, planning and prefetching
//! off the critical path.
//!
//! Module map:
//!
//! - [`types`] — cluster/routing/placement/assignment/plan domain types and
//!   the on-disk scenario format.
//! - [`perf`] — the analytical latency model (compute skew, GEMM efficiency,
//!   directional traffic volumes, transfer latency, exposed overhead).
//! - [`metrics`] — imbalance-ratio statistics.
//! - [`planner`] — greedy balance-optimal planning plus an exhaustive
//!   small-instance oracle.
//! - [`predictor`] — the lookahead gate (frozen prior + trainable residual),
//!   a seeded noisy oracle, and prediction-fidelity metrics.
//! - [`workload`] — deterministic synthetic workload generators.
//! - [`sim`] — the discrete-event pipeline simulator and experiment driver.
//! - [`cli`] — command-line entry points (`plan`, `simulate`,
//!   `train-predictor`, `sweep`).

pub mod cli;
pub mod error;
pub mod metrics;
pub mod perf;
pub mod planner;
pub mod predictor;
pub mod sim;
pub mod types;
pub mod util;
pub mod workload;

pub use error::{Error, Result};
pub use types::{
    Assignment, ClusterSpec, DedupModel, EfficiencyCurve, Placement, Plan, Scenario, SourceRouting,
};

/// Rank index within the expert-parallel group.
pub type RankId = usize;
/// Global expert index.
pub type ExpertId = usize;
/// Token (or expert-hit) count.
pub type TokenCount = u64;
/// Wall-clock seconds.
pub type Seconds = f64;
/// Data volume in bytes (fractional after deduplication scaling).
pub type Bytes = f64;
