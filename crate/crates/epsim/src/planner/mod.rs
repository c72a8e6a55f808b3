//! Greedy balance-optimal planning.
//!
//! Given a (predicted) routing matrix, the solver repeatedly pairs the
//! bottleneck rank with the least-loaded helper, replicates the bottleneck's
//! heaviest movable expert onto the helper, and water-fills remote-origin
//! tokens onto the new replica until the bottleneck reaches the cluster-mean
//! latency. Every replication is gated by a dual-side budget check so that
//! both ends of the weight transfer fit their hiding windows; the loop stops
//! on convergence, iteration budget, or when every (source, helper, expert)
//! candidate has been invalidated.
//!
//! Two latency views are tracked: the per-rank totals (compute plus
//! round-trip communication of the rank's worst direction), whose maximum
//! the solver minimizes, and the phase-split step latency (max compute plus
//! max communication across ranks), which is what a synchronous pipeline
//! pays. Accepted moves must not regress the second view, so emitted plans
//! never make a simulated layer slower than its baseline.

mod oracle;

pub use oracle::{oracle_optimal, OracleLimits};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::perf::{moe_step_latency_unchecked, transfer_latency};
use crate::types::{Assignment, ClusterSpec, Placement, Plan, RankFeasibility, SourceRouting};
use crate::util::{apportion, mean};
use crate::{ExpertId, RankId, Seconds};

/// Locality-first initialization: every token is assigned to the unique
/// base host of its expert.
pub fn init_locality_first(routing: &SourceRouting, base_placement: &Placement) -> Assignment {
    let mut flows = Vec::new();
    for rs in 0..routing.ep() {
        for e in 0..routing.num_experts() {
            let n = routing.count(rs, e);
            if n > 0 {
                flows.push(((rs, e, base_placement.base_host(e)), n));
            }
        }
    }
    Assignment::from_flows(routing, flows).expect("locality-first init conserves by construction")
}

/// Mutable solver state; see the module docs for the loop it drives.
pub struct SolverState<'a> {
    spec: &'a ClusterSpec,
    windows: &'a [Seconds],
    placement: Placement,
    assignment: Assignment,
    /// Per-rank compute + communication totals.
    latencies: Vec<Seconds>,
    /// Phase-split step latency (max compute + max comm).
    step_latency: Seconds,
    delta_in: Vec<Vec<ExpertId>>,
    delta_out: Vec<Vec<ExpertId>>,
    invalid: BTreeSet<(RankId, RankId, ExpertId)>,
    iterations: usize,
}

fn evaluate(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> (Vec<Seconds>, Seconds) {
    let (step, breakdown) = moe_step_latency_unchecked(assignment, placement, spec);
    (breakdown.into_iter().map(|b| b.total).collect(), step)
}

impl<'a> SolverState<'a> {
    pub fn new(
        routing: &SourceRouting,
        base_placement: &'a Placement,
        spec: &'a ClusterSpec,
        windows: &'a [Seconds],
    ) -> Result<Self> {
        if windows.len() != spec.ep {
            return Err(Error::InvalidPlan(format!(
                "window list has {} entries for {} ranks",
                windows.len(),
                spec.ep
            )));
        }
        if routing.ep() != spec.ep || routing.num_experts() != spec.num_experts {
            return Err(Error::InvalidRouting(
                "routing shape does not match cluster".into(),
            ));
        }
        if base_placement.ep() != spec.ep || base_placement.num_experts() != spec.num_experts {
            return Err(Error::InvalidPlacement(
                "placement shape does not match cluster".into(),
            ));
        }
        if base_placement.total_replicas() != 0 {
            return Err(Error::InvalidPlacement(
                "planning starts from a replica-free base placement".into(),
            ));
        }
        let assignment = init_locality_first(routing, base_placement);
        let (latencies, step_latency) = evaluate(&assignment, base_placement, spec);
        Ok(Self {
            spec,
            windows,
            placement: base_placement.clone(),
            assignment,
            latencies,
            step_latency,
            delta_in: vec![Vec::new(); spec.ep],
            delta_out: vec![Vec::new(); spec.ep],
            invalid: BTreeSet::new(),
            iterations: 0,
        })
    }

    pub fn latencies(&self) -> &[Seconds] {
        &self.latencies
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    /// Remote-origin token mass of `expert` currently processed on `rank`.
    /// Locally originated tokens are pinned and never count as movable.
    fn movable_mass(&self, rank: RankId, expert: ExpertId) -> u64 {
        (0..self.spec.ep)
            .filter(|&rs| rs != rank)
            .map(|rs| self.assignment.get(rs, expert, rank))
            .sum()
    }

    /// The expert on `src` with the largest movable (remote-origin) token
    /// mass whose load could shift toward `dst` and that has not been
    /// invalidated for this (src, dst) pair. The move either admits a new
    /// replica on `dst` (budget-gated) or refills an existing one (free).
    /// Ties break toward the lower expert id.
    pub fn select_heavy_expert(&self, src: RankId, dst: RankId) -> Option<ExpertId> {
        let mut best: Option<(u64, ExpertId)> = None;
        for e in self.placement.hosted_experts(src) {
            if self.invalid.contains(&(src, dst, e)) {
                continue;
            }
            let mass = self.movable_mass(src, e);
            if mass == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((m, id)) => mass > m || (mass == m && e < id),
            };
            if better {
                best = Some((mass, e));
            }
        }
        best.map(|(_, e)| e)
    }

    /// Dual-side budget check: the helper must have replica budget left, and
    /// after adding `expert` both ends of the point-to-point transfer must
    /// still fit their hiding windows (boundary counts as fitting). The
    /// sending side is the expert's base host — the rank that durably owns
    /// the weights — which is `src` itself in the common bottleneck-offload
    /// case.
    pub fn check_dual_budget(&self, src: RankId, dst: RankId, expert: ExpertId) -> bool {
        debug_assert_ne!(src, dst);
        let _ = src;
        if self.delta_in[dst].len() + 1 > self.spec.replica_budget_per_rank {
            return false;
        }
        let mut in_dst = self.delta_in[dst].clone();
        in_dst.push(expert);
        let dst_fits =
            transfer_latency(&in_dst, &self.delta_out[dst], self.spec) <= self.windows[dst];
        let sender = self.placement.base_host(expert);
        let mut out_sender = self.delta_out[sender].clone();
        if !out_sender.contains(&expert) {
            out_sender.push(expert);
        }
        let sender_fits = transfer_latency(&self.delta_in[sender], &out_sender, self.spec)
            <= self.windows[sender];
        dst_fits && sender_fits
    }

    /// Water-filling rebalance: replicate `expert` onto `dst` and greedily
    /// redirect its remote-origin tokens away from `src` until `src` reaches
    /// the cluster-mean latency or the movable pool runs dry.
    ///
    /// Sources already delivering tokens to `dst` drain first (for `dst`
    /// itself that includes its local traffic, so its own tokens come home
    /// before anyone else's move in); remaining ties break toward the lower
    /// source rank id. Returns the tentative assignment and the gain in
    /// bottleneck latency (old max - new max); the caller decides whether to
    /// accept.
    pub fn water_filling_rebalance(
        &self,
        expert: ExpertId,
        src: RankId,
        dst: RankId,
    ) -> Result<(Assignment, Seconds)> {
        let (assignment, _placement, gain, _lat, _step) =
            self.water_fill_inner(expert, src, dst)?;
        Ok((assignment, gain))
    }

    fn water_fill_inner(
        &self,
        expert: ExpertId,
        src: RankId,
        dst: RankId,
    ) -> Result<(Assignment, Placement, Seconds, Vec<Seconds>, Seconds)> {
        // Reuse an existing replica when the helper already hosts the
        // expert; otherwise admit a new one.
        let placement = if self.placement.is_hosted(dst, expert) {
            self.placement.clone()
        } else {
            self.placement.with_replica(dst, expert)?
        };
        let mut assignment = self.assignment.clone();
        let old_max = self
            .latencies
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let target = mean(&self.latencies);

        let mut sources: Vec<RankId> = (0..self.spec.ep)
            .filter(|&rs| rs != src && self.assignment.get(rs, expert, src) > 0)
            .collect();
        let delivers_to_dst = |rs: RankId| -> bool {
            (0..self.spec.num_experts).any(|e| self.assignment.get(rs, e, dst) > 0)
        };
        sources.sort_by_key(|&rs| (!delivers_to_dst(rs), rs));

        // Stop pouring once src aligns with the cluster mean, or once dst
        // has risen to src's level (filling past the crossing only moves
        // the bottleneck to the helper).
        let filled = |lat: &[Seconds]| lat[src] <= target || lat[dst] >= lat[src];

        for rs in sources {
            let (lat, _) = evaluate(&assignment, &placement, self.spec);
            if filled(&lat) {
                break;
            }
            let pool = assignment.get(rs, expert, src);
            let mut all = assignment.clone();
            all.move_tokens(rs, expert, src, dst, pool)?;
            let (lat_all, _) = evaluate(&all, &placement, self.spec);
            if !filled(&lat_all) {
                // Whole pool is not enough; take it and continue draining.
                assignment = all;
                continue;
            }
            // Smallest move that reaches the stop level. Src latency is
            // non-increasing and dst non-decreasing in the moved amount, so
            // the predicate is monotone and bisection applies.
            let mut lo = 0u64;
            let mut hi = pool;
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                let mut probe = assignment.clone();
                probe.move_tokens(rs, expert, src, dst, mid)?;
                let (lat_mid, _) = evaluate(&probe, &placement, self.spec);
                if filled(&lat_mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            assignment.move_tokens(rs, expert, src, dst, hi)?;
            break;
        }

        let (latencies, step_latency) = evaluate(&assignment, &placement, self.spec);
        let new_max = latencies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok((assignment, placement, old_max - new_max, latencies, step_latency))
    }

    /// Ranks ordered for bottleneck (descending latency) or helper
    /// (ascending) selection; ties break toward the lower rank id.
    fn rank_order(&self, descending: bool) -> Vec<RankId> {
        let mut order: Vec<RankId> = (0..self.spec.ep).collect();
        order.sort_by(|&a, &b| {
            let cmp = self.latencies[a]
                .partial_cmp(&self.latencies[b])
                .expect("latencies are finite");
            if descending {
                cmp.reverse().then(a.cmp(&b))
            } else {
                cmp.then(a.cmp(&b))
            }
        });
        order
    }

    /// Scan (bottleneck, helper) pairs from most to least promising and
    /// return the first gate-passing candidate. Pairs whose latency gap is
    /// within epsilon are skipped (pouring between near-equal ranks cannot
    /// improve the profile), and gate failures invalidate their triple, so
    /// the scan always terminates.
    fn next_candidate(&mut self, epsilon: Seconds) -> Option<(RankId, RankId, ExpertId)> {
        let srcs = self.rank_order(true);
        let dsts = self.rank_order(false);
        for &src in &srcs {
            for &dst in &dsts {
                if dst == src {
                    continue;
                }
                if self.latencies[src] - self.latencies[dst] <= epsilon {
                    continue;
                }
                while let Some(e) = self.select_heavy_expert(src, dst) {
                    // Refills of an existing replica move no weights and
                    // need no gate.
                    if self.placement.is_hosted(dst, e) || self.check_dual_budget(src, dst, e) {
                        return Some((src, dst, e));
                    }
                    self.invalid.insert((src, dst, e));
                }
            }
        }
        None
    }

    fn into_plan(self) -> Plan {
        let feasibility: Vec<RankFeasibility> = (0..self.spec.ep)
            .map(|r| RankFeasibility {
                transfer_seconds: transfer_latency(
                    &self.delta_in[r],
                    &self.delta_out[r],
                    self.spec,
                ),
                window_seconds: self.windows[r],
            })
            .collect();
        let violating_ranks: Vec<RankId> = feasibility
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.fits())
            .map(|(r, _)| r)
            .collect();
        Plan {
            degraded: !violating_ranks.is_empty(),
            violating_ranks,
            placement: self.placement,
            assignment: self.assignment,
            delta_in: self.delta_in,
            delta_out: self.delta_out,
            iterations_used: self.iterations,
            feasibility,
        }
    }
}

/// True when `new` improves on `old` lexicographically over the
/// descending-sorted latency profiles: some position drops by more than
/// `epsilon` and no earlier (worse-rank) position regresses. Comparing whole
/// profiles instead of just the maximum lets the solver walk plateaus where
/// several ranks tie at the top and no single move can lower the max yet.
fn lex_improves(old: &[Seconds], new: &[Seconds], epsilon: Seconds) -> bool {
    let mut old_sorted = old.to_vec();
    let mut new_sorted = new.to_vec();
    old_sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    new_sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let tol = 1e-12 * old_sorted[0].abs().max(1e-300);
    for (o, n) in old_sorted.iter().zip(new_sorted.iter()) {
        if *n < *o - epsilon {
            return true;
        }
        if *n > *o + tol {
            return false;
        }
    }
    false
}

/// Run the full planning loop and emit a certified plan.
///
/// Guarantees on the result: token conservation and routing validity hold
/// exactly; every rank's transfer fits its window; the bottleneck latency
/// never exceeds the locality-first baseline's; and identical inputs produce
/// identical plans.
pub fn plan(
    routing: &SourceRouting,
    base_placement: &Placement,
    spec: &ClusterSpec,
    windows: &[Seconds],
) -> Result<Plan> {
    let mut state = SolverState::new(routing, base_placement, spec, windows)?;
    let initial_max = state
        .latencies
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let epsilon = spec.solver_epsilon.unwrap_or(0.005 * initial_max);

    while state.iterations < spec.solver_max_iters {
        let Some((src, dst, e)) = state.next_candidate(epsilon) else {
            break;
        };
        let new_replica = !state.placement.is_hosted(dst, e);
        let (assignment, placement, _gain, latencies, step_latency) =
            state.water_fill_inner(e, src, dst)?;
        let improves = lex_improves(&state.latencies, &latencies, epsilon);
        // A move must also never regress the phase-split step latency a
        // synchronous pipeline would pay.
        if !improves || step_latency > state.step_latency {
            state.invalid.insert((src, dst, e));
            continue;
        }
        state.assignment = assignment;
        state.placement = placement;
        state.latencies = latencies;
        state.step_latency = step_latency;
        if new_replica {
            state.delta_in[dst].push(e);
            let sender = state.placement.base_host(e);
            if !state.delta_out[sender].contains(&e) {
                state.delta_out[sender].push(e);
            }
        }
        state.iterations += 1;
    }

    Ok(state.into_plan())
}

/// Redistribute a ground-truth routing along a plan's split ratios.
///
/// The plan was solved against a prediction; execution must follow the real
/// router output. Each (source, expert) cell of the truth is apportioned
/// across the expert's planned targets proportionally to the planned flows
/// (largest remainder, ties to the lower-indexed host). Cells the plan never
/// anticipated fall back to the expert's base host, so conservation and
/// routing validity hold regardless of prediction error, and a perfect
/// prediction reproduces the planned assignment exactly.
pub fn apply_plan_to_routing(plan: &Plan, truth: &SourceRouting) -> Result<Assignment> {
    let ep = plan.placement.ep();
    let num_experts = plan.placement.num_experts();
    if truth.ep() != ep || truth.num_experts() != num_experts {
        return Err(Error::InvalidRouting(
            "truth shape does not match plan placement".into(),
        ));
    }
    let mut flows = Vec::new();
    for rs in 0..ep {
        for e in 0..num_experts {
            let n = truth.count(rs, e);
            if n == 0 {
                continue;
            }
            let hosts = plan.placement.hosts_of(e);
            if hosts.len() == 1 {
                flows.push(((rs, e, hosts[0]), n));
                continue;
            }
            let planned: Vec<u64> = hosts
                .iter()
                .map(|&rt| plan.assignment.get(rs, e, rt))
                .collect();
            if planned.iter().sum::<u64>() == 0 {
                flows.push(((rs, e, plan.placement.base_host(e)), n));
                continue;
            }
            for (part, &rt) in apportion(n, &planned).into_iter().zip(hosts.iter()) {
                if part > 0 {
                    flows.push(((rs, e, rt), part));
                }
            }
        }
    }
    Assignment::from_flows(truth, flows)
}
