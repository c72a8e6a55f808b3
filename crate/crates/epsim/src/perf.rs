//! Analytical latency model: per-expert and per-rank compute time under the
//! GEMM efficiency curve, directional All-to-All traffic volumes with
//! deduplication, the coupled MoE step latency, expert transfer latency, and
//! exposed-overhead accounting.

use std::io::Write;

use crate::error::Result;
use crate::types::{Assignment, ClusterSpec, DedupModel, Placement};
use crate::{Bytes, ExpertId, Seconds, TokenCount};

/// Per-rank latency breakdown for one MoE layer.
///
/// `comm` counts dispatch and combine symmetrically: the critical volume is
/// the worse of ingress and egress, paid once per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RankLatency {
    pub rank: usize,
    pub compute: Seconds,
    pub ingress_volume: Bytes,
    pub egress_volume: Bytes,
    pub comm: Seconds,
    pub total: Seconds,
}

/// Processing time of one expert serving `tokens` on a rank.
///
/// Time stops shrinking below the efficiency knee: halving the tokens of an
/// unsaturated expert halves useful work and efficiency together, so the
/// fragmentation penalty shows up as flat latency at shrinking batch sizes.
pub fn expert_compute_time(tokens: TokenCount, spec: &ClusterSpec) -> Seconds {
    if tokens == 0 {
        return 0.0;
    }
    let eta = spec.efficiency_curve.eta(tokens);
    tokens as f64 * spec.per_token_flops / (eta * spec.peak_flops)
}

/// Per-rank compute latency: the sum over every expert the rank serves
/// (native and replicated) of its per-expert time at the rank-local count.
pub fn rank_compute_latency(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> Result<Vec<Seconds>> {
    assignment.validate_against(placement)?;
    Ok(rank_compute_latency_unchecked(assignment, placement, spec))
}

pub(crate) fn rank_compute_latency_unchecked(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> Vec<Seconds> {
    (0..placement.ep())
        .map(|r| {
            placement
                .hosted_experts(r)
                .into_iter()
                .map(|e| expert_compute_time(assignment.tokens_on(e, r), spec))
                .sum()
        })
        .collect()
}

/// Straggler view of a layer: the slowest rank dictates the latency, and
/// max/mean is the skew proxy.
pub fn layer_compute_latency(per_rank: &[Seconds]) -> (Seconds, f64) {
    assert!(!per_rank.is_empty(), "no ranks");
    let max = per_rank.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = per_rank.iter().sum::<f64>() / per_rank.len() as f64;
    let proxy = if mean == 0.0 { 1.0 } else { max / mean };
    (max, proxy)
}

/// Per-rank deduplication factors `(lambda_in, lambda_out)` under the given
/// assignment.
///
/// The fan-in model estimates unique shipped tokens from the routing's
/// token groups: tokens of one group hitting several experts on the same
/// target rank ship once. When an expert's flow is split across targets,
/// group membership is attributed proportionally, and overlap within a
/// (group, target) pair is taken as maximal — the deduplication-friendly
/// reading. Without group metadata the factors fall back to constant 1.
pub fn dedup_factors(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> (Vec<f64>, Vec<f64>) {
    let ep = placement.ep();
    match &spec.dedup_model {
        DedupModel::Constant {
            lambda_in,
            lambda_out,
        } => (vec![*lambda_in; ep], vec![*lambda_out; ep]),
        DedupModel::Fanin => {
            let Some(groups) = assignment.groups() else {
                return (vec![1.0; ep], vec![1.0; ep]);
            };
            let counts = assignment.source_counts();
            // hits[rs][rt], unique[rs][rt] over remote pairs only.
            let mut hits = vec![vec![0.0f64; ep]; ep];
            let mut unique = vec![vec![0.0f64; ep]; ep];
            for (rs, _e, rt, n) in assignment.iter() {
                if rs != rt {
                    hits[rs][rt] += n as f64;
                }
            }
            for g in groups {
                let rs = g.source;
                for rt in 0..ep {
                    if rt == rs {
                        continue;
                    }
                    // Unique tokens of this group reaching rt: maximal
                    // overlap across its experts' flows into rt.
                    let mut max_flow = 0.0f64;
                    for &e in &g.experts {
                        let cell = counts[rs][e];
                        if cell == 0 {
                            continue;
                        }
                        let flow =
                            assignment.get(rs, e, rt) as f64 * g.count as f64 / cell as f64;
                        max_flow = max_flow.max(flow);
                    }
                    unique[rs][rt] += max_flow;
                }
            }
            let mut lambda_in = vec![1.0f64; ep];
            let mut lambda_out = vec![1.0f64; ep];
            for r in 0..ep {
                let (h_in, u_in) = (0..ep)
                    .filter(|&rs| rs != r)
                    .fold((0.0, 0.0), |(h, u), rs| (h + hits[rs][r], u + unique[rs][r]));
                if u_in > 0.0 {
                    lambda_in[r] = (h_in / u_in).max(1.0);
                }
                let (h_out, u_out) = (0..ep)
                    .filter(|&rt| rt != r)
                    .fold((0.0, 0.0), |(h, u), rt| (h + hits[r][rt], u + unique[r][rt]));
                if u_out > 0.0 {
                    lambda_out[r] = (h_out / u_out).max(1.0);
                }
            }
            (lambda_in, lambda_out)
        }
    }
}

/// Per-rank `(ingress, egress)` All-to-All volumes in bytes.
///
/// Ingress of rank `r`: activation bytes for every token arriving from a
/// different source rank, scaled down by the ingress dedup factor. Egress of
/// rank `r`: bytes for every token it originated whose assigned target is
/// remote, scaled by the egress factor.
pub fn traffic_volumes(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> Vec<(Bytes, Bytes)> {
    let ep = placement.ep();
    let (lambda_in, lambda_out) = dedup_factors(assignment, placement, spec);
    let mut inbound = vec![0u64; ep];
    let mut outbound = vec![0u64; ep];
    for (rs, _e, rt, n) in assignment.iter() {
        if rs != rt {
            inbound[rt] += n;
            outbound[rs] += n;
        }
    }
    (0..ep)
        .map(|r| {
            (
                spec.hidden_dim * inbound[r] as f64 / lambda_in[r],
                spec.hidden_dim * outbound[r] as f64 / lambda_out[r],
            )
        })
        .collect()
}

/// Coupled MoE layer latency: compute skew plus network skew, each taken at
/// its own bottleneck rank. Returns the total and the per-rank breakdown.
pub fn moe_step_latency(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> Result<(Seconds, Vec<RankLatency>)> {
    assignment.validate_against(placement)?;
    Ok(moe_step_latency_unchecked(assignment, placement, spec))
}

pub(crate) fn moe_step_latency_unchecked(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> (Seconds, Vec<RankLatency>) {
    let compute = rank_compute_latency_unchecked(assignment, placement, spec);
    let volumes = traffic_volumes(assignment, placement, spec);
    let breakdown: Vec<RankLatency> = compute
        .iter()
        .zip(volumes.iter())
        .enumerate()
        .map(|(rank, (&comp, &(v_in, v_out)))| {
            let comm = 2.0 * v_in.max(v_out) / spec.net_bandwidth;
            RankLatency {
                rank,
                compute: comp,
                ingress_volume: v_in,
                egress_volume: v_out,
                comm,
                total: comp + comm,
            }
        })
        .collect();
    let max_compute = breakdown
        .iter()
        .map(|b| b.compute)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_comm = breakdown
        .iter()
        .map(|b| b.comm)
        .fold(f64::NEG_INFINITY, f64::max);
    (max_compute + max_comm, breakdown)
}

/// Weight-transfer latency for one rank's prefetch/transmit sets: reads and
/// writes proceed in parallel, so the worse direction dominates.
pub fn transfer_latency(
    delta_in: &[ExpertId],
    delta_out: &[ExpertId],
    spec: &ClusterSpec,
) -> Seconds {
    let volume = delta_in.len().max(delta_out.len()) as f64 * spec.expert_weight_bytes;
    volume / spec.net_bandwidth
}

/// Exposed overhead over a set of ranks: each rank's transfer is compared
/// against its own hiding window first, and only then is the worst shortfall
/// taken, clamped at zero.
pub fn exposed_overhead(transfer: &[Seconds], window: &[Seconds]) -> Seconds {
    assert_eq!(
        transfer.len(),
        window.len(),
        "transfer/window lists must have equal length"
    );
    transfer
        .iter()
        .zip(window.iter())
        .map(|(t, w)| t - w)
        .fold(0.0, f64::max)
}

/// Write a per-rank breakdown as CSV.
pub fn write_breakdown_csv<W: Write>(out: &mut W, breakdown: &[RankLatency]) -> std::io::Result<()> {
    writeln!(out, "rank,compute_s,v_in_bytes,v_out_bytes,comm_s,total_s")?;
    for b in breakdown {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            b.rank, b.compute, b.ingress_volume, b.egress_volume, b.comm, b.total
        )?;
    }
    Ok(())
}
