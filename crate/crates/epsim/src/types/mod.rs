//! Shared domain types: hardware/model constants, routing matrices, expert
//! placements, token assignments, and emitted plans, plus the on-disk
//! scenario format.
//!
//! Everything here is immutable after construction and safe to share across
//! threads; mutation happens only through crate-internal solver paths that
//! keep the cached marginals consistent.

mod assignment;
mod cluster;
mod placement;
mod plan;
mod routing;
mod scenario;

pub use assignment::Assignment;
pub use cluster::{ClusterSpec, DedupModel, EfficiencyCurve, EfficiencyPoint};
pub use placement::Placement;
pub use plan::{Plan, PlanFile, RankFeasibility};
pub use routing::{SourceRouting, TokenGroup};
pub use scenario::{validate_scenario, Scenario};
