//! On-disk scenario format and cross-type validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{ClusterSpec, Placement, SourceRouting};
use crate::workload::WorkloadScript;

/// A scenario file bundles the cluster constants with an optional routing
/// matrix, placement, and workload script. Matrices are row-major nested
/// arrays; expert and rank ids are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<SourceRouting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<WorkloadScript>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let scenario: Scenario = serde_json::from_str(&text)?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The scenario's placement, defaulting to the sharded layout.
    pub fn effective_placement(&self) -> Result<Placement> {
        match &self.placement {
            Some(p) => Ok(p.clone()),
            None => Placement::sharded(self.cluster.ep, self.cluster.num_experts),
        }
    }

    /// Report every violated invariant (empty = valid). Never mutates.
    pub fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if let Err(e) = self.cluster.validate() {
            report.push(e.to_string());
        }
        let placement = match self.effective_placement() {
            Ok(p) => Some(p),
            Err(e) => {
                report.push(e.to_string());
                None
            }
        };
        if let (Some(r), Some(p)) = (&self.routing, &placement) {
            report.extend(routing_and_placement_checks(&self.cluster, r, p));
        } else if let Some(p) = &placement {
            match p.validate() {
                Err(e) => report.push(e.to_string()),
                Ok(()) => report.extend(placement_vs_spec(&self.cluster, p)),
            }
        } else if let Some(r) = &self.routing {
            if let Err(e) = r.validate() {
                report.push(e.to_string());
            }
        }
        if let Some(s) = &self.script {
            if let Err(e) = s.validate(&self.cluster) {
                report.push(e.to_string());
            }
        }
        report
    }
}

fn placement_vs_spec(spec: &ClusterSpec, placement: &Placement) -> Vec<String> {
    let mut report = Vec::new();
    if placement.ep() != spec.ep || placement.num_experts() != spec.num_experts {
        report.push(format!(
            "placement shape {}x{} does not match cluster {}x{}",
            placement.ep(),
            placement.num_experts(),
            spec.ep,
            spec.num_experts
        ));
    }
    for (r, reps) in placement.replicas().iter().enumerate() {
        if reps.len() > spec.replica_budget_per_rank {
            report.push(format!(
                "rank {r} holds {} replicas, budget is {}",
                reps.len(),
                spec.replica_budget_per_rank
            ));
        }
    }
    report
}

fn routing_and_placement_checks(
    spec: &ClusterSpec,
    routing: &SourceRouting,
    placement: &Placement,
) -> Vec<String> {
    let mut report = Vec::new();
    if let Err(e) = routing.validate() {
        report.push(e.to_string());
    }
    match placement.validate() {
        Err(e) => report.push(e.to_string()),
        Ok(()) => report.extend(placement_vs_spec(spec, placement)),
    }
    if routing.ep() != spec.ep || routing.num_experts() != spec.num_experts {
        report.push(format!(
            "routing shape {}x{} does not match cluster {}x{}",
            routing.ep(),
            routing.num_experts(),
            spec.ep,
            spec.num_experts
        ));
    } else if let Err(e) = routing.batch_tokens(spec.top_k) {
        report.push(e.to_string());
    }
    report
}

/// Check spec/routing/placement against every shared invariant and return
/// the list of violations (empty = valid). Report-only; inputs are never
/// mutated.
pub fn validate_scenario(
    spec: &ClusterSpec,
    routing: &SourceRouting,
    placement: &Placement,
) -> Vec<String> {
    let mut report = Vec::new();
    if let Err(e) = spec.validate() {
        report.push(e.to_string());
    }
    report.extend(routing_and_placement_checks(spec, routing, placement));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DedupModel, EfficiencyCurve};
    use serde_json::json;

    fn spec() -> ClusterSpec {
        ClusterSpec {
            ep: 2,
            num_experts: 4,
            top_k: 2,
            hidden_dim: 4096.0,
            expert_weight_bytes: 1e8,
            per_token_flops: 1e9,
            peak_flops: 1e15,
            net_bandwidth: 9e11,
            efficiency_curve: EfficiencyCurve::Saturating { n_sat: 256 },
            dedup_model: DedupModel::default(),
            replica_budget_per_rank: 3,
            replica_slots_per_rank: 6,
            solver_max_iters: 16,
            solver_epsilon: None,
            attention_duration: 0.0,
            predict_allgather_cost: 0.0,
            planner_duration_model: 0.0,
            predictor_flops_per_token: None,
            update_cost: 0.0,
        }
    }

    #[test]
    fn valid_scenario_has_empty_report() {
        let routing = SourceRouting::new(vec![vec![1, 1, 1, 1], vec![1, 1, 1, 1]]).unwrap();
        let placement = Placement::sharded(2, 4).unwrap();
        let report = validate_scenario(&spec(), &routing, &placement);
        assert!(report.is_empty(), "{report:?}");
    }

    #[test]
    fn double_hosted_base_reported() {
        let routing = SourceRouting::new(vec![vec![1, 1, 1, 1], vec![1, 1, 1, 1]]).unwrap();
        // Deserialization can produce placements the constructors would
        // reject; validation must catch them.
        let placement: Placement = serde_json::from_value(json!({
            "base": [[true, true, false, false], [true, false, true, true]],
            "replicas": [[], []],
        }))
        .unwrap();
        let report = validate_scenario(&spec(), &routing, &placement);
        assert!(
            report.iter().any(|v| v.contains("base not a partition")),
            "{report:?}"
        );
    }

    #[test]
    fn conservation_mismatch_reported() {
        // 5 hits with top_k = 2 cannot come from an integral token count.
        let routing = SourceRouting::new(vec![vec![2, 1, 1, 1], vec![0, 0, 0, 0]]).unwrap();
        let placement = Placement::sharded(2, 4).unwrap();
        let report = validate_scenario(&spec(), &routing, &placement);
        assert!(
            report.iter().any(|v| v.contains("token conservation")),
            "{report:?}"
        );
    }

    #[test]
    fn scenario_json_roundtrip_is_identity() {
        let scenario = Scenario {
            cluster: spec(),
            placement: Some(Placement::sharded(2, 4).unwrap()),
            routing: Some(SourceRouting::new(vec![vec![1, 2, 3, 4], vec![4, 3, 2, 1]]).unwrap()),
            script: None,
        };
        let json = scenario.to_json().unwrap();
        let back: Scenario = serde_json::from_str(&json).unwrap();
        assert_eq!(scenario, back);
    }
}
