//! Replica-slot double buffering: two disjoint slot banks per rank so the
//! next layer's weights stream in while the current layer's are read.

use crate::error::{Error, Result};
use crate::types::{ClusterSpec, Plan};
use crate::ExpertId;

/// Slot assignment for one layer: per rank, the `(expert, slot)` pairs its
/// replicas occupy.
pub type SlotSchedule = Vec<Vec<(ExpertId, usize)>>;

/// Assign every prefetched expert a physical slot such that writes for
/// layer `L + 1` never target a slot being read by layer `L`: even layers
/// use the low bank, odd layers the high bank.
pub fn replica_slot_manager(plans: &[Plan], spec: &ClusterSpec) -> Result<Vec<SlotSchedule>> {
    let bank_size = spec.replica_slots_per_rank / 2;
    let mut schedules = Vec::with_capacity(plans.len());
    for (layer, plan) in plans.iter().enumerate() {
        let bank_base = (layer % 2) * bank_size;
        let mut schedule: SlotSchedule = Vec::with_capacity(plan.ep());
        for (rank, replicas) in plan.delta_in.iter().enumerate() {
            if replicas.len() > spec.replica_budget_per_rank || replicas.len() > bank_size {
                return Err(Error::SlotBudget {
                    rank,
                    layer,
                    needed: replicas.len(),
                    budget: spec.replica_budget_per_rank.min(bank_size),
                });
            }
            schedule.push(
                replicas
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| (e, bank_base + i))
                    .collect(),
            );
        }
        schedules.push(schedule);
    }
    Ok(schedules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{init_locality_first, plan};
    use crate::types::{DedupModel, EfficiencyCurve, Placement, SourceRouting};

    fn spec() -> ClusterSpec {
        ClusterSpec {
            ep: 2,
            num_experts: 8,
            top_k: 1,
            hidden_dim: 4096.0,
            expert_weight_bytes: 1e8,
            per_token_flops: 1e9,
            peak_flops: 1e15,
            net_bandwidth: 9e11,
            efficiency_curve: EfficiencyCurve::Saturating { n_sat: 1 },
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

    fn plan_with_deltas(delta_in: Vec<Vec<usize>>) -> Plan {
        let s = spec();
        let routing = SourceRouting::new(vec![vec![1; 8], vec![1; 8]]).unwrap();
        let base = Placement::sharded(2, 8).unwrap();
        let mut p = plan(&routing, &base, &s, &[1.0, 1.0]).unwrap();
        p.delta_in = delta_in;
        p
    }

    #[test]
    fn banks_alternate_across_layers() {
        let s = spec();
        let p0 = plan_with_deltas(vec![vec![], vec![0, 1, 2]]);
        let p1 = plan_with_deltas(vec![vec![], vec![3, 4, 5]]);
        let schedules = replica_slot_manager(&[p0, p1], &s).unwrap();
        let layer0: Vec<usize> = schedules[0][1].iter().map(|&(_, s)| s).collect();
        let layer1: Vec<usize> = schedules[1][1].iter().map(|&(_, s)| s).collect();
        assert_eq!(layer0, vec![0, 1, 2]);
        assert_eq!(layer1, vec![3, 4, 5]);
    }

    #[test]
    fn empty_plans_use_no_slots() {
        let s = spec();
        let p = plan_with_deltas(vec![vec![], vec![]]);
        let schedules = replica_slot_manager(&[p], &s).unwrap();
        assert!(schedules[0].iter().all(|r| r.is_empty()));
    }

    #[test]
    fn over_budget_replicas_error_names_rank_and_layer() {
        let s = spec();
        let good = plan_with_deltas(vec![vec![], vec![0]]);
        let bad = plan_with_deltas(vec![vec![], vec![0, 1, 2, 3]]);
        let err = replica_slot_manager(&[good, bad], &s).unwrap_err();
        match err {
            Error::SlotBudget { rank, layer, needed, budget } => {
                assert_eq!(rank, 1);
                assert_eq!(layer, 1);
                assert_eq!(needed, 4);
                assert_eq!(budget, 3);
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
