//! Deterministic synthetic workload generators.
//!
//! Three regimes reproduce the characteristic shapes of expert-parallel
//! inference traffic:
//!
//! - `prefill_burst` — prompt batches dominated by a handful of semantic
//!   clusters; per-step cluster re-rolls create spikes in the rank-level
//!   imbalance ratio.
//! - `decode_churn` — continuous batching: each request slot follows one of
//!   a small set of semantic modes, and a fraction of slots is replaced
//!   every step, so hot sets migrate gradually.
//! - `repeat_skew` — a narrow prompt set hammering a few experts.
//!
//! Generation is fully determined by the script: expert popularity is a
//! Zipf profile over a seeded permutation, sampling runs on fixed-point
//! cumulative tables and a counter-seeded ChaCha stream, and shift events
//! reseed the permutations from a given step onward. The imbalance bands
//! the defaults produce are generator calibration targets, not claims about
//! any particular deployment's traffic.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{ClusterSpec, SourceRouting, TokenGroup};
use crate::util::{apportion, derive_seed};
use crate::{ExpertId, RankId};

/// Semantic modes cycling through decode slots.
const DECODE_MODES: usize = 6;
/// Share of new decode slots joining the currently dominant mode (per mille).
const DECODE_DOMINANT_PERMILLE: u64 = 600;
/// Steps between rotations of the dominant decode mode.
const DECODE_PHASE_PERIOD: usize = 20;
/// Share of repeat-skew tokens pinned to the hot set (per mille).
const REPEAT_HOT_PERMILLE: u64 = 700;
/// Hot-set size for the repeat regime.
const REPEAT_HOT_EXPERTS: usize = 8;
/// Peak rank-level IR the prefill regime is calibrated to exceed.
pub const PREFILL_PEAK_IR_TARGET: f64 = 2.6;
/// Band the decode regime is calibrated to drift within.
pub const DECODE_IR_BAND: (f64, f64) = (1.4, 2.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PrefillBurst,
    DecodeChurn,
    RepeatSkew,
}

/// A scripted regime change: from `step` onward, expert popularity
/// permutations are drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftEvent {
    pub step: usize,
    pub seed: u64,
}

fn default_layers() -> usize {
    1
}
fn default_skew() -> f64 {
    1.2
}

/// Everything needed to regenerate a trace byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadScript {
    pub regime: Regime,
    pub steps: usize,
    /// Global tokens per step (decode: one per request slot).
    pub tokens_per_step: u64,
    /// MoE layers per step; each layer gets an independent popularity
    /// permutation.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Zipf exponent of the popularity profile.
    #[serde(default = "default_skew")]
    pub skew: f64,
    /// Fraction of request slots replaced per step (decode regime).
    #[serde(default)]
    pub churn_rate: f64,
    #[serde(default)]
    pub shift_events: Vec<ShiftEvent>,
    pub seed: u64,
    /// Probability that a token's source rank is the base host of its
    /// first-layer lead expert instead of a uniform draw.
    #[serde(default)]
    pub locality_bias: f64,
}

impl WorkloadScript {
    pub fn validate(&self, spec: &ClusterSpec) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidScript("steps must be positive".into()));
        }
        if self.tokens_per_step == 0 {
            return Err(Error::InvalidScript("tokens_per_step must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidScript("layers must be positive".into()));
        }
        if !(self.skew > 0.0) || !self.skew.is_finite() {
            return Err(Error::InvalidScript(format!(
                "skew must be positive, got {}",
                self.skew
            )));
        }
        for (name, v) in [("churn_rate", self.churn_rate), ("locality_bias", self.locality_bias)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidScript(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        for ev in &self.shift_events {
            if ev.step >= self.steps {
                return Err(Error::InvalidScript(format!(
                    "shift event at step {} outside trace of {} steps",
                    ev.step, self.steps
                )));
            }
        }
        // Rank-level IR ceiling: a token's k hits land on at most
        // min(k, experts-per-rank) experts of one rank.
        let epr = spec.experts_per_rank();
        let ceiling =
            spec.ep as f64 * spec.top_k.min(epr) as f64 / spec.top_k as f64;
        let target = match self.regime {
            Regime::PrefillBurst => Some(PREFILL_PEAK_IR_TARGET),
            Regime::DecodeChurn => Some(DECODE_IR_BAND.1),
            Regime::RepeatSkew => None,
        };
        if let Some(t) = target {
            if ceiling <= t {
                return Err(Error::InvalidScript(format!(
                    "infeasible statistical target: regime aims at IR {t} but ep={}, top_k={}, experts/rank={} cap rank IR at {ceiling}",
                    spec.ep, spec.top_k, epr
                )));
            }
        }
        Ok(())
    }
}

/// Append a shift event; duplicates of an identical `(step, seed)` pair are
/// dropped, and events stay sorted by step.
pub fn apply_shift(script: &WorkloadScript, step: usize, seed: u64) -> WorkloadScript {
    assert!(step < script.steps, "shift step {step} outside trace");
    let mut next = script.clone();
    let ev = ShiftEvent { step, seed };
    if !next.shift_events.contains(&ev) {
        next.shift_events.push(ev);
        next.shift_events.sort_by_key(|e| (e.step, e.seed));
    }
    next
}

/// Generate the full trace: one routing per layer per step.
pub fn generate(script: &WorkloadScript, spec: &ClusterSpec) -> Result<Vec<Vec<SourceRouting>>> {
    Ok(TraceGenerator::new(script, spec)?.collect())
}

// ── Sampling machinery ──────────────────────────────────────────────────

/// Fixed-point cumulative table for weighted sampling. Weights are rounded
/// onto a 2^-24 grid so the table is reproducible even if the platform's
/// `powf` differs in the last ulp.
struct CumTable {
    cum: Vec<u64>,
    total: u64,
}

impl CumTable {
    fn zipf(n: usize, exponent: f64) -> Self {
        let mut cum = Vec::with_capacity(n);
        let mut total = 0u64;
        for i in 0..n {
            let w = ((i + 1) as f64).powf(-exponent);
            let fixed = (w * (1u64 << 24) as f64).round() as u64 + 1;
            total += fixed;
            cum.push(total);
        }
        Self { cum, total }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let x = rng.gen_range(0..self.total);
        self.cum.partition_point(|&c| c <= x)
    }
}

/// Draw `k` distinct experts from `table` mapped through `perm`, returned in
/// affinity order (strongest first). Falls back to a deterministic scan of
/// the popularity order if rejection sampling stalls.
fn sample_distinct<R: Rng>(
    table: &CumTable,
    perm: &[ExpertId],
    k: usize,
    rng: &mut R,
) -> Vec<ExpertId> {
    let mut positions: Vec<usize> = Vec::with_capacity(k);
    let mut attempts = 0;
    while positions.len() < k {
        let pos = table.sample(rng);
        if !positions.contains(&pos) {
            positions.push(pos);
        } else {
            attempts += 1;
            if attempts > 64 * k {
                for p in 0..perm.len() {
                    if positions.len() == k {
                        break;
                    }
                    if !positions.contains(&p) {
                        positions.push(p);
                    }
                }
            }
        }
    }
    // Lower popularity position = stronger affinity.
    positions.sort_unstable();
    positions.into_iter().map(|p| perm[p]).collect()
}

/// Mode draw for a fresh decode request: biased toward the dominant mode,
/// uniform over the rest.
fn sample_mode<R: Rng>(rng: &mut R, dominant: u8) -> u8 {
    if rng.gen_range(0..1000u64) < DECODE_DOMINANT_PERMILLE {
        dominant
    } else {
        let other = rng.gen_range(0..DECODE_MODES as u8 - 1);
        if other >= dominant {
            other + 1
        } else {
            other
        }
    }
}

fn shuffled_experts(num_experts: usize, seed: u64) -> Vec<ExpertId> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut perm: Vec<ExpertId> = (0..num_experts).collect();
    // Fisher-Yates.
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

// ── Trace generation ────────────────────────────────────────────────────

/// Streaming trace generator; yields the per-layer routings of one step at
/// a time so long experiments never hold a full trace in memory.
pub struct TraceGenerator {
    script: WorkloadScript,
    ep: usize,
    num_experts: usize,
    top_k: usize,
    step: usize,
    /// Decode regime: semantic mode per request slot.
    slot_modes: Vec<u8>,
}

impl TraceGenerator {
    pub fn new(script: &WorkloadScript, spec: &ClusterSpec) -> Result<Self> {
        script.validate(spec)?;
        spec.validate()?;
        let mut gen = Self {
            script: script.clone(),
            ep: spec.ep,
            num_experts: spec.num_experts,
            top_k: spec.top_k,
            step: 0,
            slot_modes: Vec::new(),
        };
        if script.regime == Regime::DecodeChurn {
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(script.seed, "slots-init", &[]));
            let dominant = gen.dominant_mode(gen.epoch_root(0), 0);
            gen.slot_modes = (0..script.tokens_per_step)
                .map(|_| sample_mode(&mut rng, dominant))
                .collect();
        }
        Ok(gen)
    }

    /// The semantic mode most new decode requests belong to; rotates every
    /// [`DECODE_PHASE_PERIOD`] steps and re-rolls at shift events.
    fn dominant_mode(&self, epoch: u64, step: usize) -> u8 {
        (derive_seed(epoch, "dominant", &[(step / DECODE_PHASE_PERIOD) as u64])
            % DECODE_MODES as u64) as u8
    }

    /// Seed governing popularity permutations at `step`: the last shift
    /// event at or before it, folded into the script seed.
    fn epoch_root(&self, step: usize) -> u64 {
        let mut root = self.script.seed;
        for ev in &self.script.shift_events {
            if ev.step <= step {
                root = derive_seed(self.script.seed, "shift", &[ev.seed, ev.step as u64]);
            }
        }
        root
    }

    fn generate_step(&mut self) -> Vec<SourceRouting> {
        let step = self.step;
        let b = self.script.tokens_per_step as usize;
        let epoch = self.epoch_root(step);

        if self.script.regime == Regime::DecodeChurn && step > 0 {
            // Slot lifecycle is independent of shift events; the modes new
            // slots join are not (they track the post-shift dominant).
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                self.script.seed,
                "churn",
                &[step as u64],
            ));
            let dominant = self.dominant_mode(epoch, step);
            let threshold = (self.script.churn_rate * u64::MAX as f64) as u64;
            for mode in self.slot_modes.iter_mut() {
                if rng.gen::<u64>() < threshold {
                    *mode = sample_mode(&mut rng, dominant);
                }
            }
        }

        // Cluster composition for the prefill regime (per step).
        let cluster_of: Vec<u8> = match self.script.regime {
            Regime::PrefillBurst => {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    epoch,
                    "clusters",
                    &[step as u64],
                ));
                let n_clusters = 1 + rng.gen_range(0..3usize);
                let weights: Vec<u64> =
                    (0..n_clusters).map(|_| 1 + rng.gen_range(0..4u64)).collect();
                let sizes = apportion(b as u64, &weights);
                let mut out = Vec::with_capacity(b);
                for (c, &size) in sizes.iter().enumerate() {
                    out.extend(std::iter::repeat(c as u8).take(size as usize));
                }
                out
            }
            Regime::DecodeChurn => self.slot_modes.clone(),
            Regime::RepeatSkew => vec![0; b],
        };

        let mut layer_expert_lists: Vec<Vec<Vec<ExpertId>>> =
            Vec::with_capacity(self.script.layers);
        for layer in 0..self.script.layers {
            layer_expert_lists.push(self.sample_layer(step, layer, epoch, &cluster_of));
        }

        // Source attribution is per token per step, shared across layers.
        let sources = self.sample_sources(step, epoch, &layer_expert_lists[0]);

        (0..self.script.layers)
            .map(|layer| {
                let mut agg: BTreeMap<(RankId, Vec<ExpertId>), u64> = BTreeMap::new();
                for t in 0..b {
                    *agg.entry((sources[t], layer_expert_lists[layer][t].clone()))
                        .or_insert(0) += 1;
                }
                let groups: Vec<TokenGroup> = agg
                    .into_iter()
                    .map(|((source, experts), count)| TokenGroup {
                        source,
                        count,
                        experts,
                    })
                    .collect();
                SourceRouting::from_groups(self.ep, self.num_experts, groups)
                    .expect("generated groups are well-formed")
            })
            .collect()
    }

    fn sample_layer(
        &self,
        step: usize,
        layer: usize,
        epoch: u64,
        cluster_of: &[u8],
    ) -> Vec<Vec<ExpertId>> {
        let b = cluster_of.len();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
            epoch,
            "tokens",
            &[step as u64, layer as u64],
        ));
        match self.script.regime {
            Regime::PrefillBurst => {
                let n_clusters = cluster_of.iter().copied().max().unwrap_or(0) as usize + 1;
                let table = CumTable::zipf(self.num_experts, self.script.skew);
                let perms: Vec<Vec<ExpertId>> = (0..n_clusters)
                    .map(|c| {
                        shuffled_experts(
                            self.num_experts,
                            derive_seed(
                                epoch,
                                "cluster-perm",
                                &[step as u64, layer as u64, c as u64],
                            ),
                        )
                    })
                    .collect();
                (0..b)
                    .map(|t| {
                        sample_distinct(&table, &perms[cluster_of[t] as usize], self.top_k, &mut rng)
                    })
                    .collect()
            }
            Regime::DecodeChurn => {
                let table = CumTable::zipf(self.num_experts, self.script.skew);
                let perms: Vec<Vec<ExpertId>> = (0..DECODE_MODES)
                    .map(|m| {
                        shuffled_experts(
                            self.num_experts,
                            derive_seed(epoch, "mode-perm", &[layer as u64, m as u64]),
                        )
                    })
                    .collect();
                (0..b)
                    .map(|t| {
                        sample_distinct(&table, &perms[cluster_of[t] as usize], self.top_k, &mut rng)
                    })
                    .collect()
            }
            Regime::RepeatSkew => {
                let hot = REPEAT_HOT_EXPERTS.min(self.num_experts);
                let perm =
                    shuffled_experts(self.num_experts, derive_seed(epoch, "perm", &[layer as u64]));
                let hot_table = CumTable::zipf(hot, self.script.skew);
                (0..b)
                    .map(|_| {
                        let mut experts: Vec<usize> = Vec::with_capacity(self.top_k);
                        let mut attempts = 0;
                        while experts.len() < self.top_k {
                            let pos = if rng.gen_range(0..1000u64) < REPEAT_HOT_PERMILLE {
                                hot_table.sample(&mut rng)
                            } else {
                                rng.gen_range(0..self.num_experts)
                            };
                            if !experts.contains(&pos) {
                                experts.push(pos);
                            } else {
                                attempts += 1;
                                if attempts > 64 * self.top_k {
                                    for p in 0..self.num_experts {
                                        if experts.len() == self.top_k {
                                            break;
                                        }
                                        if !experts.contains(&p) {
                                            experts.push(p);
                                        }
                                    }
                                }
                            }
                        }
                        experts.sort_unstable();
                        experts.into_iter().map(|p| perm[p]).collect()
                    })
                    .collect()
            }
        }
    }

    fn sample_sources(
        &self,
        step: usize,
        epoch: u64,
        first_layer: &[Vec<ExpertId>],
    ) -> Vec<RankId> {
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(epoch, "sources", &[step as u64]));
        let threshold = (self.script.locality_bias * u64::MAX as f64) as u64;
        let experts_per_rank = self.num_experts / self.ep;
        first_layer
            .iter()
            .map(|experts| {
                let uniform = rng.gen_range(0..self.ep);
                if threshold > 0 && rng.gen::<u64>() < threshold {
                    experts[0] / experts_per_rank
                } else {
                    uniform
                }
            })
            .collect()
    }
}

impl Iterator for TraceGenerator {
    type Item = Vec<SourceRouting>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.script.steps {
            return None;
        }
        let routings = self.generate_step();
        self.step += 1;
        Some(routings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{imbalance_ratio, jensen_shannon_divergence, rank_loads_sharded};
    use crate::types::{DedupModel, EfficiencyCurve, Placement};

    fn spec(ep: usize, num_experts: usize, top_k: usize) -> ClusterSpec {
        ClusterSpec {
            ep,
            num_experts,
            top_k,
            hidden_dim: 4096.0,
            expert_weight_bytes: 1e8,
            per_token_flops: 1e9,
            peak_flops: 1e15,
            net_bandwidth: 9e11,
            efficiency_curve: EfficiencyCurve::Saturating { n_sat: 128 },
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

    fn script(regime: Regime, steps: usize, seed: u64) -> WorkloadScript {
        WorkloadScript {
            regime,
            steps,
            tokens_per_step: 2048,
            layers: 2,
            skew: 1.5,
            churn_rate: 0.05,
            shift_events: Vec::new(),
            seed,
            locality_bias: 0.0,
        }
    }

    #[test]
    fn conservation_holds_every_step() {
        let spec = spec(4, 32, 4);
        let trace = generate(&script(Regime::DecodeChurn, 3, 11), &spec).unwrap();
        for step in &trace {
            assert_eq!(step.len(), 2);
            for routing in step {
                assert_eq!(routing.total_hits(), 2048 * 4);
                routing.validate().unwrap();
            }
        }
    }

    #[test]
    fn traces_are_deterministic() {
        let spec = spec(4, 32, 4);
        let s = script(Regime::PrefillBurst, 3, 42);
        let a = generate(&s, &spec).unwrap();
        let b = generate(&s, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_distribution_without_churn() {
        let spec = spec(4, 32, 4);
        let mut s = script(Regime::DecodeChurn, 6, 5);
        s.churn_rate = 0.0;
        let trace = generate(&s, &spec).unwrap();
        // Same expected distribution every step: large-sample divergence
        // between the first and last step stays tiny.
        let first: Vec<f64> = trace[0][0].expert_loads().iter().map(|&x| x as f64).collect();
        let last: Vec<f64> = trace[5][0].expert_loads().iter().map(|&x| x as f64).collect();
        let d = jensen_shannon_divergence(&first, &last);
        assert!(d < 0.01, "divergence {d}");
    }

    #[test]
    fn prefill_burst_peaks_above_target() {
        let spec = spec(8, 128, 4);
        let mut s = script(Regime::PrefillBurst, 25, 7);
        s.tokens_per_step = 4096;
        let placement = Placement::sharded(8, 128).unwrap();
        let mut peak: f64 = 0.0;
        for step in TraceGenerator::new(&s, &spec).unwrap() {
            for routing in &step {
                let ir = imbalance_ratio(&rank_loads_sharded(routing, &placement)).unwrap();
                peak = peak.max(ir);
            }
        }
        assert!(peak > PREFILL_PEAK_IR_TARGET, "peak IR {peak}");
    }

    #[test]
    fn decode_churn_stays_in_band() {
        let spec = spec(8, 128, 4);
        let mut s = script(Regime::DecodeChurn, 40, 3);
        s.skew = 1.2;
        let placement = Placement::sharded(8, 128).unwrap();
        let mut irs = Vec::new();
        for step in TraceGenerator::new(&s, &spec).unwrap() {
            let ir = imbalance_ratio(&rank_loads_sharded(&step[0], &placement)).unwrap();
            irs.push(ir);
        }
        let lo = irs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = irs.iter().cloned().fold(0.0f64, f64::max);
        assert!(
            lo >= DECODE_IR_BAND.0 && hi <= DECODE_IR_BAND.1,
            "IR range [{lo:.3}, {hi:.3}] outside band {DECODE_IR_BAND:?}"
        );
    }

    #[test]
    fn repeat_skew_concentrates_on_hot_set() {
        let spec = spec(8, 128, 4);
        let s = script(Regime::RepeatSkew, 3, 9);
        let trace = generate(&s, &spec).unwrap();
        for step in &trace {
            let mut loads = step[0].expert_loads();
            loads.sort_unstable_by(|a, b| b.cmp(a));
            let top8: u64 = loads.iter().take(8).sum();
            let total: u64 = loads.iter().sum();
            assert!(
                top8 as f64 >= 0.6 * total as f64,
                "hot share {}",
                top8 as f64 / total as f64
            );
        }
    }

    #[test]
    fn shift_event_changes_distribution_abruptly() {
        let spec = spec(8, 128, 4);
        let mut s = script(Regime::DecodeChurn, 12, 21);
        s.skew = 1.8;
        s = apply_shift(&s, 6, 999);
        let trace = generate(&s, &spec).unwrap();
        let before: Vec<f64> = trace[5][0].expert_loads().iter().map(|&x| x as f64).collect();
        let after: Vec<f64> = trace[7][0].expert_loads().iter().map(|&x| x as f64).collect();
        let d = jensen_shannon_divergence(&before, &after);
        assert!(d > 0.3, "divergence {d}");
    }

    #[test]
    fn apply_shift_is_idempotent() {
        let s = script(Regime::DecodeChurn, 10, 1);
        let once = apply_shift(&s, 4, 7);
        let twice = apply_shift(&once, 4, 7);
        assert_eq!(once, twice);
        assert_eq!(once.shift_events.len(), 1);
    }

    #[test]
    fn shift_at_step_zero_applies_everywhere() {
        let spec = spec(4, 32, 4);
        let s = script(Regime::RepeatSkew, 2, 33);
        let shifted = apply_shift(&s, 0, 404);
        let base = generate(&s, &spec).unwrap();
        let moved = generate(&shifted, &spec).unwrap();
        assert_ne!(base[0], moved[0], "step 0 must already use the new hot set");
    }

    #[test]
    fn infeasible_target_errors() {
        // ep=2 caps rank IR at 2.0 < 2.6 when k <= experts/rank.
        let spec = spec(2, 16, 4);
        let s = script(Regime::PrefillBurst, 2, 1);
        assert!(matches!(
            s.validate(&spec),
            Err(Error::InvalidScript(_))
        ));
    }
}
