//! Workload-level skew statistics: the imbalance ratio over token loads and
//! over modeled compute latencies, plus the per-step series container.

use std::io::Write;

use crate::error::{Error, Result};
use crate::types::{Assignment, Placement, SourceRouting};
use crate::TokenCount;

/// Imbalance ratio over per-rank token loads: max / mean. 1.0 is perfect
/// balance. Errors on an all-zero workload.
pub fn imbalance_ratio(loads: &[TokenCount]) -> Result<f64> {
    if loads.is_empty() || loads.iter().all(|&l| l == 0) {
        return Err(Error::EmptyWorkload);
    }
    let max = *loads.iter().max().expect("non-empty") as f64;
    let mean = loads.iter().sum::<u64>() as f64 / loads.len() as f64;
    Ok(max / mean)
}

/// Imbalance ratio over float quantities (e.g. modeled latencies).
pub fn imbalance_ratio_f(values: &[f64]) -> Result<f64> {
    if values.is_empty() || values.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyWorkload);
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(max / mean)
}

/// Per-rank token loads under sharded semantics: every expert's full load
/// lands on its base host (replicas, if any, are ignored).
pub fn rank_loads_sharded(routing: &SourceRouting, placement: &Placement) -> Vec<TokenCount> {
    let mut loads = vec![0u64; placement.ep()];
    for e in 0..routing.num_experts() {
        loads[placement.base_host(e)] += routing.expert_load(e);
    }
    loads
}

/// Per-rank token loads of an assignment (tokens processed per rank).
pub fn rank_loads_assigned(assignment: &Assignment) -> Vec<TokenCount> {
    assignment.rank_loads().to_vec()
}

/// Jensen-Shannon divergence between two distributions given as
/// non-negative weight vectors (normalized internally). Natural log; the
/// value lies in `[0, ln 2]`.
pub fn jensen_shannon_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must have equal support");
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    assert!(ps > 0.0 && qs > 0.0, "distributions must have positive mass");
    let kl = |a: &[f64], a_sum: f64, b: &[f64], b_sum: f64| -> f64 {
        let mut acc = 0.0;
        for (&ai, &bi) in a.iter().zip(b.iter()) {
            let pa = ai / a_sum;
            if pa > 0.0 {
                // m is positive wherever p is.
                let pm = 0.5 * (ai / a_sum + bi / b_sum);
                acc += pa * (pa / pm).ln();
            }
        }
        acc
    };
    0.5 * kl(p, ps, q, qs) + 0.5 * kl(q, qs, p, ps)
}

/// Per-step (or per-layer) imbalance series: token IR and modeled-latency
/// skew side by side, since both are reported.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IRSeries {
    pub labels: Vec<usize>,
    pub ir_tokens: Vec<f64>,
    pub ir_latency: Vec<f64>,
}

impl IRSeries {
    pub fn push(&mut self, label: usize, ir_tokens: f64, ir_latency: f64) {
        debug_assert!(ir_tokens >= 1.0 - 1e-12, "IR below 1: {ir_tokens}");
        debug_assert!(ir_latency >= 1.0 - 1e-12, "latency skew below 1: {ir_latency}");
        self.labels.push(label);
        self.ir_tokens.push(ir_tokens);
        self.ir_latency.push(ir_latency);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mean_ir_tokens(&self) -> f64 {
        crate::util::mean(&self.ir_tokens)
    }

    pub fn mean_ir_latency(&self) -> f64 {
        crate::util::mean(&self.ir_latency)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "step,ir_tokens,ir_latency")?;
        for i in 0..self.len() {
            writeln!(out, "{},{},{}", self.labels[i], self.ir_tokens[i], self.ir_latency[i])?;
        }
        Ok(())
    }
}
