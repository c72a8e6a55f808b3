//! Hardware and model constants for one expert-parallel deployment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_replica_budget() -> usize {
    3
}
fn default_replica_slots() -> usize {
    6
}
fn default_solver_max_iters() -> usize {
    16
}

/// GEMM efficiency as a function of the per-expert token count on a rank.
///
/// Grouped-GEMM kernels lose efficiency at small token counts (padding,
/// reduced arithmetic intensity), which is what makes fragmenting an expert
/// across too many replicas visible in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EfficiencyCurve {
    /// `eta(n) = min(1, n / n_sat)`: linear ramp, saturating at `n_sat` tokens.
    Saturating { n_sat: u64 },
    /// Piecewise-linear interpolation over sorted `(tokens, efficiency)`
    /// breakpoints; clamped outside the table range.
    PiecewiseTable { points: Vec<EfficiencyPoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub tokens: u64,
    pub efficiency: f64,
}

impl EfficiencyCurve {
    /// Evaluate the efficiency at `tokens >= 1`. Values lie in `(0, 1]` and
    /// are non-decreasing in the token count.
    pub fn eta(&self, tokens: u64) -> f64 {
        match self {
            EfficiencyCurve::Saturating { n_sat } => {
                if tokens >= *n_sat {
                    1.0
                } else {
                    tokens as f64 / *n_sat as f64
                }
            }
            EfficiencyCurve::PiecewiseTable { points } => {
                debug_assert!(!points.is_empty());
                let first = &points[0];
                if tokens <= first.tokens {
                    return first.efficiency;
                }
                let last = &points[points.len() - 1];
                if tokens >= last.tokens {
                    return last.efficiency;
                }
                // Invariant: breakpoints strictly increasing, so the pair
                // bracketing `tokens` is unique.
                let idx = points.partition_point(|p| p.tokens <= tokens);
                let lo = &points[idx - 1];
                let hi = &points[idx];
                let t = (tokens - lo.tokens) as f64 / (hi.tokens - lo.tokens) as f64;
                lo.efficiency + t * (hi.efficiency - lo.efficiency)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EfficiencyCurve::Saturating { n_sat } => {
                if *n_sat == 0 {
                    return Err(Error::InvalidSpec("efficiency n_sat must be >= 1".into()));
                }
            }
            EfficiencyCurve::PiecewiseTable { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidSpec("efficiency table is empty".into()));
                }
                for w in points.windows(2) {
                    if w[1].tokens <= w[0].tokens {
                        return Err(Error::InvalidSpec(
                            "efficiency table breakpoints must be strictly increasing".into(),
                        ));
                    }
                    if w[1].efficiency < w[0].efficiency {
                        return Err(Error::InvalidSpec(
                            "efficiency must be non-decreasing in token count".into(),
                        ));
                    }
                }
                for p in points {
                    if !(p.efficiency > 0.0 && p.efficiency <= 1.0) {
                        return Err(Error::InvalidSpec(
                            "efficiency values must lie in (0, 1]".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// How token deduplication scales All-to-All traffic.
///
/// A token hitting several experts on the same rank is shipped once; the
/// deduplication factor is the ratio of expert-hits to unique shipped tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DedupModel {
    /// Fixed per-direction factors, both `>= 1`. The default is `(1, 1)`:
    /// no dedup, the worst case.
    Constant { lambda_in: f64, lambda_out: f64 },
    /// Per-rank factors computed from the routing's token-group metadata as
    /// expert-hits per unique token, floored at 1. Falls back to `(1, 1)`
    /// when the routing carries no groups.
    Fanin,
}

impl Default for DedupModel {
    fn default() -> Self {
        DedupModel::Constant {
            lambda_in: 1.0,
            lambda_out: 1.0,
        }
    }
}

impl DedupModel {
    pub fn validate(&self) -> Result<()> {
        if let DedupModel::Constant {
            lambda_in,
            lambda_out,
        } = self
        {
            if !(*lambda_in >= 1.0 && *lambda_out >= 1.0) {
                return Err(Error::InvalidSpec(
                    "dedup factors must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Hardware and model constants for one scenario.
///
/// Token counts are integers everywhere; rates, sizes and durations are
/// 64-bit floats. The global batch size is always derived from a routing
/// matrix rather than stored here, so the two can never disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Expert-parallel group size (number of ranks).
    pub ep: usize,
    /// Total expert count; must be a positive multiple of `ep`.
    pub num_experts: usize,
    /// Experts activated per token.
    pub top_k: usize,
    /// Bytes per token activation moved during dispatch/combine.
    pub hidden_dim: f64,
    /// Parameter bytes per expert (the unit of prefetch traffic).
    pub expert_weight_bytes: f64,
    /// FLOPs per token per expert.
    pub per_token_flops: f64,
    /// Peak device FLOPs per second.
    pub peak_flops: f64,
    /// Flat per-rank network bandwidth, bytes per second.
    pub net_bandwidth: f64,
    pub efficiency_curve: EfficiencyCurve,
    #[serde(default)]
    pub dedup_model: DedupModel,
    /// Max redundant experts resident per rank per layer.
    #[serde(default = "default_replica_budget")]
    pub replica_budget_per_rank: usize,
    /// Physical replica slots per rank; double buffering requires
    /// `replica_budget_per_rank <= replica_slots_per_rank / 2`.
    #[serde(default = "default_replica_slots")]
    pub replica_slots_per_rank: usize,
    /// Hard cap on solver iterations.
    #[serde(default = "default_solver_max_iters")]
    pub solver_max_iters: usize,
    /// Absolute convergence threshold in seconds. When absent, the solver
    /// uses 0.5% of the initial bottleneck latency.
    #[serde(default)]
    pub solver_epsilon: Option<f64>,
    /// Fixed attention duration per layer, seconds.
    #[serde(default)]
    pub attention_duration: f64,
    /// Fixed cost of aggregating per-rank predictions, seconds.
    #[serde(default)]
    pub predict_allgather_cost: f64,
    /// Modeled solver cost per iteration, seconds.
    #[serde(default)]
    pub planner_duration_model: f64,
    /// FLOPs per token for the lookahead predictor MLP. When absent,
    /// `per_token_flops / 128` (the predictor is small next to an expert).
    #[serde(default)]
    pub predictor_flops_per_token: Option<f64>,
    /// Fixed cost of preparing expert/assignment masks before dispatch.
    #[serde(default)]
    pub update_cost: f64,
}

impl ClusterSpec {
    /// Experts per rank under the even base partition.
    pub fn experts_per_rank(&self) -> usize {
        self.num_experts / self.ep
    }

    pub fn predictor_flops(&self) -> f64 {
        self.predictor_flops_per_token
            .unwrap_or(self.per_token_flops / 128.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ep == 0 {
            return Err(Error::InvalidSpec("ep must be positive".into()));
        }
        if self.num_experts < self.ep || self.num_experts % self.ep != 0 {
            return Err(Error::InvalidSpec(format!(
                "num_experts ({}) must be a positive multiple of ep ({})",
                self.num_experts, self.ep
            )));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidSpec(format!(
                "top_k ({}) must be in 1..=num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        if self.replica_budget_per_rank * 2 > self.replica_slots_per_rank {
            return Err(Error::InvalidSpec(format!(
                "replica_budget_per_rank ({}) exceeds half of replica_slots_per_rank ({}): double buffering needs two banks",
                self.replica_budget_per_rank, self.replica_slots_per_rank
            )));
        }
        if self.solver_max_iters == 0 {
            return Err(Error::InvalidSpec("solver_max_iters must be positive".into()));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("expert_weight_bytes", self.expert_weight_bytes),
            ("per_token_flops", self.per_token_flops),
            ("peak_flops", self.peak_flops),
            ("net_bandwidth", self.net_bandwidth),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("attention_duration", self.attention_duration),
            ("predict_allgather_cost", self.predict_allgather_cost),
            ("planner_duration_model", self.planner_duration_model),
            ("update_cost", self.update_cost),
            ("solver_epsilon", self.solver_epsilon.unwrap_or(0.0)),
            (
                "predictor_flops_per_token",
                self.predictor_flops_per_token.unwrap_or(1.0),
            ),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        self.efficiency_curve.validate()?;
        self.dedup_model.validate()?;
        Ok(())
    }
}
