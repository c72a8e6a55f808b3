//! Exhaustive small-instance oracle: the reference optimum the greedy
//! planner is judged against.
//!
//! The oracle enumerates every replica set within the budgets and, for each
//! resulting placement, every discretized split of each replicated expert's
//! load across its hosts. For a fixed split the communication-minimal
//! source attribution is closed-form — retain as many locally originated
//! tokens as each host's quota allows, which minimizes every rank's ingress
//! and egress simultaneously — so only the per-expert quotas need to be
//! searched. Constant deduplication only; the fan-in model couples volumes
//! to the attribution and would break that reduction.

use crate::error::{Error, Result};
use crate::perf::{expert_compute_time, transfer_latency};
use crate::types::{
    Assignment, ClusterSpec, DedupModel, Placement, Plan, RankFeasibility, SourceRouting,
};
use crate::{ExpertId, RankId, Seconds, TokenCount};

/// Instance-size limits for the exhaustive search.
#[derive(Debug, Clone)]
pub struct OracleLimits {
    pub max_ep: usize,
    pub max_experts: usize,
    pub max_total_replicas: usize,
    /// Token granularity of the quota grid (>= 1).
    pub granularity: u64,
    /// Cap on objective evaluations before the instance is declared too
    /// large.
    pub max_evaluations: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_ep: 4,
            max_experts: 8,
            max_total_replicas: 3,
            granularity: 10,
            max_evaluations: 20_000_000,
        }
    }
}

/// Exhaustive search for the bottleneck-optimal feasible plan. Returns the
/// optimal bottleneck latency (max over ranks of compute + communication)
/// and a plan achieving it.
pub fn oracle_optimal(
    routing: &SourceRouting,
    base_placement: &Placement,
    spec: &ClusterSpec,
    windows: &[Seconds],
    limits: &OracleLimits,
) -> Result<(Seconds, Plan)> {
    if spec.ep > limits.max_ep {
        return Err(Error::OracleLimit(format!(
            "ep {} exceeds oracle limit {}",
            spec.ep, limits.max_ep
        )));
    }
    if spec.num_experts > limits.max_experts {
        return Err(Error::OracleLimit(format!(
            "{} experts exceed oracle limit {}",
            spec.num_experts, limits.max_experts
        )));
    }
    if !matches!(spec.dedup_model, DedupModel::Constant { .. }) {
        return Err(Error::OracleLimit(
            "oracle supports constant deduplication only".into(),
        ));
    }
    if limits.granularity == 0 {
        return Err(Error::OracleLimit("granularity must be >= 1".into()));
    }
    if windows.len() != spec.ep {
        return Err(Error::InvalidPlan(format!(
            "window list has {} entries for {} ranks",
            windows.len(),
            spec.ep
        )));
    }
    if base_placement.total_replicas() != 0 {
        return Err(Error::InvalidPlacement(
            "oracle starts from a replica-free base placement".into(),
        ));
    }
    if routing.ep() != spec.ep || routing.num_experts() != spec.num_experts {
        return Err(Error::InvalidRouting(
            "routing shape does not match cluster".into(),
        ));
    }

    let search = Search {
        routing,
        base: base_placement,
        spec,
        windows,
        limits,
        lambda: match spec.dedup_model {
            DedupModel::Constant {
                lambda_in,
                lambda_out,
            } => (lambda_in, lambda_out),
            DedupModel::Fanin => unreachable!(),
        },
    };
    search.run()
}

struct Search<'a> {
    routing: &'a SourceRouting,
    base: &'a Placement,
    spec: &'a ClusterSpec,
    windows: &'a [Seconds],
    limits: &'a OracleLimits,
    lambda: (f64, f64),
}

#[derive(Clone)]
struct Best {
    objective: Seconds,
    replicas: Vec<(ExpertId, RankId)>,
    quotas: Vec<Vec<TokenCount>>,
}

impl<'a> Search<'a> {
    fn run(&self) -> Result<(Seconds, Plan)> {
        let ep = self.spec.ep;
        let num_experts = self.spec.num_experts;

        // Candidate replica positions: every (expert, non-home rank).
        let mut candidates: Vec<(ExpertId, RankId)> = Vec::new();
        for e in 0..num_experts {
            for r in 0..ep {
                if self.base.base_host(e) != r {
                    candidates.push((e, r));
                }
            }
        }

        let max_total = self
            .limits
            .max_total_replicas
            .min(ep * self.spec.replica_budget_per_rank);

        let mut evaluations = 0u64;
        let mut best: Option<Best> = None;
        let mut subset: Vec<(ExpertId, RankId)> = Vec::new();
        self.enumerate_subsets(&candidates, 0, max_total, &mut subset, &mut best, &mut evaluations)?;

        let best = best.expect("the empty replica set is always feasible");
        let plan = self.build_plan(&best)?;
        Ok((best.objective, plan))
    }

    fn enumerate_subsets(
        &self,
        candidates: &[(ExpertId, RankId)],
        start: usize,
        remaining: usize,
        subset: &mut Vec<(ExpertId, RankId)>,
        best: &mut Option<Best>,
        evaluations: &mut u64,
    ) -> Result<()> {
        if self.replica_set_feasible(subset) {
            self.search_quotas(subset, best, evaluations)?;
        }
        if remaining == 0 {
            return Ok(());
        }
        for i in start..candidates.len() {
            subset.push(candidates[i]);
            self.enumerate_subsets(candidates, i + 1, remaining - 1, subset, best, evaluations)?;
            subset.pop();
        }
        Ok(())
    }

    /// Per-rank replica budgets and transfer windows for one replica set.
    fn replica_set_feasible(&self, subset: &[(ExpertId, RankId)]) -> bool {
        let ep = self.spec.ep;
        let mut delta_in: Vec<Vec<ExpertId>> = vec![Vec::new(); ep];
        let mut delta_out: Vec<Vec<ExpertId>> = vec![Vec::new(); ep];
        for &(e, r) in subset {
            if delta_in[r].contains(&e) {
                return false;
            }
            delta_in[r].push(e);
            let home = self.base.base_host(e);
            if !delta_out[home].contains(&e) {
                delta_out[home].push(e);
            }
        }
        for r in 0..ep {
            if delta_in[r].len() > self.spec.replica_budget_per_rank {
                return false;
            }
            if transfer_latency(&delta_in[r], &delta_out[r], self.spec) > self.windows[r] {
                return false;
            }
        }
        true
    }

    /// Hosts of each expert under `subset`, home rank first.
    fn hosts(&self, subset: &[(ExpertId, RankId)]) -> Vec<Vec<RankId>> {
        let mut hosts: Vec<Vec<RankId>> = (0..self.spec.num_experts)
            .map(|e| vec![self.base.base_host(e)])
            .collect();
        for &(e, r) in subset {
            hosts[e].push(r);
        }
        for h in hosts.iter_mut() {
            h.sort_unstable();
        }
        hosts
    }

    /// Quota grid for splitting `total` tokens across `parts` hosts.
    fn grid(&self, total: TokenCount) -> Vec<TokenCount> {
        let g = self.limits.granularity;
        let mut points: Vec<TokenCount> = (0..=total / g).map(|i| i * g).collect();
        if *points.last().unwrap_or(&0) != total {
            points.push(total);
        }
        points
    }

    fn search_quotas(
        &self,
        subset: &[(ExpertId, RankId)],
        best: &mut Option<Best>,
        evaluations: &mut u64,
    ) -> Result<()> {
        let hosts = self.hosts(subset);
        let replicated: Vec<ExpertId> = (0..self.spec.num_experts)
            .filter(|&e| hosts[e].len() > 1)
            .collect();

        // Start from the single-host loads and refine the replicated
        // experts recursively.
        let mut quotas: Vec<Vec<TokenCount>> = (0..self.spec.num_experts)
            .map(|e| {
                let n = self.routing.expert_load(e);
                let mut q = vec![0; hosts[e].len()];
                q[0] = n;
                q
            })
            .collect();
        self.recurse_experts(subset, &hosts, &replicated, 0, &mut quotas, best, evaluations)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse_experts(
        &self,
        subset: &[(ExpertId, RankId)],
        hosts: &[Vec<RankId>],
        replicated: &[ExpertId],
        idx: usize,
        quotas: &mut Vec<Vec<TokenCount>>,
        best: &mut Option<Best>,
        evaluations: &mut u64,
    ) -> Result<()> {
        if idx == replicated.len() {
            *evaluations += 1;
            if *evaluations > self.limits.max_evaluations {
                return Err(Error::OracleLimit(format!(
                    "evaluation budget {} exhausted",
                    self.limits.max_evaluations
                )));
            }
            let objective = self.objective(hosts, quotas);
            let better = match best {
                None => true,
                Some(b) => objective < b.objective,
            };
            if better {
                *best = Some(Best {
                    objective,
                    replicas: subset.to_vec(),
                    quotas: quotas.clone(),
                });
            }
            return Ok(());
        }
        let e = replicated[idx];
        let n = self.routing.expert_load(e);
        let h = hosts[e].len();
        let mut assign = vec![0u64; h];
        self.recurse_quota(subset, hosts, replicated, idx, e, n, 0, &mut assign, quotas, best, evaluations)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse_quota(
        &self,
        subset: &[(ExpertId, RankId)],
        hosts: &[Vec<RankId>],
        replicated: &[ExpertId],
        idx: usize,
        expert: ExpertId,
        remaining: TokenCount,
        pos: usize,
        assign: &mut Vec<TokenCount>,
        quotas: &mut Vec<Vec<TokenCount>>,
        best: &mut Option<Best>,
        evaluations: &mut u64,
    ) -> Result<()> {
        let h = hosts[expert].len();
        if pos == h - 1 {
            assign[pos] = remaining;
            quotas[expert] = assign.clone();
            return self.recurse_experts(subset, hosts, replicated, idx + 1, quotas, best, evaluations);
        }
        for q in self.grid(remaining) {
            assign[pos] = q;
            self.recurse_quota(
                subset,
                hosts,
                replicated,
                idx,
                expert,
                remaining - q,
                pos + 1,
                assign,
                quotas,
                best,
                evaluations,
            )?;
        }
        Ok(())
    }

    /// Bottleneck latency of a quota combination under communication-minimal
    /// attribution (maximal local retention).
    fn objective(&self, hosts: &[Vec<RankId>], quotas: &[Vec<TokenCount>]) -> Seconds {
        let ep = self.spec.ep;
        let counts = self.routing.counts();
        let mut compute = vec![0.0f64; ep];
        let mut inflow = vec![0u64; ep];
        // Every token leaves its source unless retained by a local quota.
        let mut outflow: Vec<u64> = (0..ep).map(|rs| counts[rs].iter().sum()).collect();
        for e in 0..self.spec.num_experts {
            for (i, &r) in hosts[e].iter().enumerate() {
                let q = quotas[e][i];
                compute[r] += expert_compute_time(q, self.spec);
                let local = q.min(counts[r][e]);
                inflow[r] += q - local;
                outflow[r] -= local;
            }
        }
        let (lin, lout) = self.lambda;
        let mut worst = f64::NEG_INFINITY;
        for r in 0..ep {
            let v_in = self.spec.hidden_dim * inflow[r] as f64 / lin;
            let v_out = self.spec.hidden_dim * outflow[r] as f64 / lout;
            let total = compute[r] + 2.0 * v_in.max(v_out) / self.spec.net_bandwidth;
            worst = worst.max(total);
        }
        worst
    }

    /// Materialize the winning combination into a full plan.
    fn build_plan(&self, best: &Best) -> Result<Plan> {
        let ep = self.spec.ep;
        let mut placement = self.base.clone();
        let mut delta_in: Vec<Vec<ExpertId>> = vec![Vec::new(); ep];
        let mut delta_out: Vec<Vec<ExpertId>> = vec![Vec::new(); ep];
        for &(e, r) in &best.replicas {
            placement = placement.with_replica(r, e)?;
            delta_in[r].push(e);
            let home = self.base.base_host(e);
            if !delta_out[home].contains(&e) {
                delta_out[home].push(e);
            }
        }
        let hosts = self.hosts(&best.replicas);
        let counts = self.routing.counts();

        let mut flows: Vec<((RankId, ExpertId, RankId), TokenCount)> = Vec::new();
        for e in 0..self.spec.num_experts {
            // Local retention first.
            let mut demand: Vec<TokenCount> = Vec::with_capacity(hosts[e].len());
            let mut supply: Vec<TokenCount> = counts.iter().map(|row| row[e]).collect();
            for (i, &r) in hosts[e].iter().enumerate() {
                let local = best.quotas[e][i].min(counts[r][e]);
                if local > 0 {
                    flows.push(((r, e, r), local));
                }
                supply[r] -= local;
                demand.push(best.quotas[e][i] - local);
            }
            // Deterministic completion: ascending sources fill ascending
            // hosts. Any completion yields the same volumes.
            for rs in 0..ep {
                let mut left = supply[rs];
                if left == 0 {
                    continue;
                }
                for (i, &rt) in hosts[e].iter().enumerate() {
                    if left == 0 {
                        break;
                    }
                    let take = left.min(demand[i]);
                    if take > 0 {
                        flows.push(((rs, e, rt), take));
                        demand[i] -= take;
                        left -= take;
                    }
                }
            }
        }
        let assignment = Assignment::from_flows(self.routing, flows)?;
        assignment.validate_against(&placement)?;

        let feasibility: Vec<RankFeasibility> = (0..ep)
            .map(|r| RankFeasibility {
                transfer_seconds: transfer_latency(&delta_in[r], &delta_out[r], self.spec),
                window_seconds: self.windows[r],
            })
            .collect();
        Ok(Plan {
            placement,
            assignment,
            delta_in,
            delta_out,
            iterations_used: 0,
            feasibility,
            degraded: false,
            violating_ranks: Vec::new(),
        })
    }
}
