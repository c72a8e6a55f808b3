//! Discrete-event simulator of the dual-track pipeline.
//!
//! The main stream runs attention, All-to-All dispatch, grouped-GEMM expert
//! compute, and All-to-All combine per layer, with durations taken from the
//! analytical model. In lookahead mode an auxiliary track runs alongside:
//! during layer L's dispatch the predictor forecasts layer L+1's routing;
//! the solver then plans replication for L+1 while L computes; the planned
//! weight transfers stream during the remainder of L's compute window
//! (part 1), are preemptively suspended for the combine collective, and
//! finish during L+1's attention (part 2). Auxiliary work that does not fit
//! its window extends the critical path and is accounted as exposed
//! overhead: solver spill delays the combine, and transfer overrun delays
//! the next dispatch.
//!
//! Layer 0 always runs on the base placement — it has no lookahead
//! producer — and the last layer's auxiliary track idles.

mod events;
mod slots;

pub use events::{write_events_csv, Phase, PhaseEvent, Resource};
pub use slots::{replica_slot_manager, SlotSchedule};

use crate::error::{Error, Result};
use crate::metrics::{imbalance_ratio, rank_loads_assigned, rank_loads_sharded};
use crate::perf::{
    rank_compute_latency_unchecked, transfer_latency, traffic_volumes,
};
use crate::planner::{apply_plan_to_routing, init_locality_first, plan as solve_plan};
use crate::predictor::{noisy_oracle_predict, NoisyOracleConfig};
use crate::types::{Assignment, ClusterSpec, Placement, Plan, SourceRouting};
use crate::util::derive_seed;
use crate::workload::{TraceGenerator, WorkloadScript};
use crate::Seconds;

// ── Step simulation ─────────────────────────────────────────────────────

/// Where each layer's plan comes from.
pub enum PlanSource<'a> {
    /// Standard sharded execution; no auxiliary track.
    Baseline,
    /// Plan each layer during the previous one from its prediction
    /// (`predicted[l]` is the forecast of layer `l`; index 0 is unused).
    /// With planning disabled the auxiliary track idles entirely and the
    /// timeline is bit-identical to baseline.
    Lookahead {
        predicted: &'a [SourceRouting],
        planning_enabled: bool,
    },
    /// Replay externally produced per-layer plans. With `prefetch` the
    /// weight transfers are scheduled in the split-phase windows (overruns
    /// become exposed overhead); without it the replicas are assumed
    /// resident (amortized elsewhere).
    Injected {
        plans: &'a [Option<Plan>],
        prefetch: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanStats {
    pub replicas: usize,
    pub iterations: usize,
}

/// Outcome of one simulated step: the mode's timeline next to the baseline
/// timeline on the same routing, with per-layer skew and overhead accounts.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub baseline_latency: Seconds,
    pub mode_latency: Seconds,
    pub per_layer_baseline: Vec<Seconds>,
    pub per_layer_mode: Vec<Seconds>,
    pub per_layer_exposed: Vec<Seconds>,
    pub ir_tokens_pre: Vec<f64>,
    pub ir_tokens_post: Vec<f64>,
    pub latency_skew_pre: Vec<f64>,
    pub latency_skew_post: Vec<f64>,
    pub plan_stats: Vec<PlanStats>,
    pub events: Vec<PhaseEvent>,
}

/// Phase durations of one layer under a given assignment.
struct LayerDurations {
    dispatch: Seconds,
    compute: Seconds,
    combine: Seconds,
}

fn layer_durations(
    assignment: &Assignment,
    placement: &Placement,
    spec: &ClusterSpec,
) -> LayerDurations {
    let compute = rank_compute_latency_unchecked(assignment, placement, spec)
        .into_iter()
        .fold(0.0f64, f64::max);
    let volume = traffic_volumes(assignment, placement, spec)
        .into_iter()
        .map(|(v_in, v_out)| v_in.max(v_out))
        .fold(0.0f64, f64::max);
    let alltoall = volume / spec.net_bandwidth;
    LayerDurations {
        dispatch: alltoall,
        compute,
        combine: alltoall,
    }
}

/// Per-rank hiding window for transfers planned during layer `l`: whatever
/// remains of the compute phase once the solver is done (estimated with the
/// full iteration budget, so the certificate stays valid when the solver
/// finishes early) plus the next layer's attention.
fn estimate_windows(
    moe_start: Seconds,
    moe_end: Seconds,
    predict_end: Seconds,
    spec: &ClusterSpec,
) -> Vec<Seconds> {
    let plan_end_est =
        predict_end + spec.solver_max_iters as f64 * spec.planner_duration_model;
    let part1 = (moe_end - plan_end_est.max(moe_start)).max(0.0);
    vec![part1 + spec.attention_duration; spec.ep]
}

fn predict_duration(truth: &SourceRouting, spec: &ClusterSpec) -> Seconds {
    let tokens_per_rank = truth.total_hits() as f64 / spec.top_k as f64 / spec.ep as f64;
    tokens_per_rank * spec.predictor_flops() / spec.peak_flops + spec.predict_allgather_cost
}

/// Standalone hiding-window estimate for planning against `routing`,
/// derived from the pre-plan baseline timing the way the simulator sizes
/// them mid-pipeline: the compute phase left after a worst-case solver run,
/// plus the next attention.
pub fn planning_windows(routing: &SourceRouting, spec: &ClusterSpec) -> Result<Vec<Seconds>> {
    let base = Placement::sharded(spec.ep, spec.num_experts)?;
    let assignment = init_locality_first(routing, &base);
    let dur = layer_durations(&assignment, &base, spec);
    let dispatch_start = 0.0;
    let moe_start = dispatch_start + dur.dispatch;
    let moe_end = moe_start + dur.compute;
    let predict_end = dispatch_start + predict_duration(routing, spec);
    Ok(estimate_windows(moe_start, moe_end, predict_end, spec))
}

/// Simulate one step. The baseline timeline is always computed alongside
/// the requested mode so every result carries its own reference.
pub fn simulate_step(
    truth: &[SourceRouting],
    spec: &ClusterSpec,
    source: PlanSource,
    record_events: bool,
) -> Result<StepResult> {
    if truth.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let layers = truth.len();
    match &source {
        PlanSource::Lookahead { predicted, .. } => {
            if predicted.len() != layers {
                return Err(Error::PredictionMisaligned(format!(
                    "{} predictions for {layers} layers",
                    predicted.len()
                )));
            }
        }
        PlanSource::Injected { plans, .. } => {
            if plans.len() != layers {
                return Err(Error::PredictionMisaligned(format!(
                    "{} injected plans for {layers} layers",
                    plans.len()
                )));
            }
        }
        PlanSource::Baseline => {}
    }

    let base = Placement::sharded(spec.ep, spec.num_experts)?;
    let baseline = run_timeline(truth, spec, &base, &TimelinePlans::Baseline, false)?;
    let mode = match &source {
        PlanSource::Baseline => baseline.clone(),
        PlanSource::Lookahead {
            predicted,
            planning_enabled,
        } => {
            if *planning_enabled {
                run_timeline(
                    truth,
                    spec,
                    &base,
                    &TimelinePlans::Lookahead { predicted },
                    record_events,
                )?
            } else {
                run_timeline(truth, spec, &base, &TimelinePlans::Baseline, record_events)?
            }
        }
        PlanSource::Injected { plans, prefetch } => run_timeline(
            truth,
            spec,
            &base,
            &TimelinePlans::Injected {
                plans,
                prefetch: *prefetch,
            },
            record_events,
        )?,
    };

    // Per-layer skew metrics, pre (sharded) and post (executed assignment).
    let mut ir_tokens_pre = Vec::with_capacity(layers);
    let mut ir_tokens_post = Vec::with_capacity(layers);
    let mut latency_skew_pre = Vec::with_capacity(layers);
    let mut latency_skew_post = Vec::with_capacity(layers);
    for (l, routing) in truth.iter().enumerate() {
        let sharded = init_locality_first(routing, &base);
        let pre_loads = rank_loads_sharded(routing, &base);
        let pre_lat = rank_compute_latency_unchecked(&sharded, &base, spec);
        ir_tokens_pre.push(imbalance_ratio(&pre_loads).unwrap_or(1.0));
        latency_skew_pre.push(crate::metrics::imbalance_ratio_f(&pre_lat).unwrap_or(1.0));
        match &mode.executed[l] {
            Some((assignment, placement)) => {
                let post_loads = rank_loads_assigned(assignment);
                let post_lat = rank_compute_latency_unchecked(assignment, placement, spec);
                ir_tokens_post.push(imbalance_ratio(&post_loads).unwrap_or(1.0));
                latency_skew_post
                    .push(crate::metrics::imbalance_ratio_f(&post_lat).unwrap_or(1.0));
            }
            None => {
                ir_tokens_post.push(*ir_tokens_pre.last().expect("pushed above"));
                latency_skew_post.push(*latency_skew_pre.last().expect("pushed above"));
            }
        }
    }

    Ok(StepResult {
        baseline_latency: baseline.total,
        mode_latency: mode.total,
        per_layer_baseline: baseline.per_layer,
        per_layer_mode: mode.per_layer,
        per_layer_exposed: mode.per_layer_exposed,
        ir_tokens_pre,
        ir_tokens_post,
        latency_skew_pre,
        latency_skew_post,
        plan_stats: mode.plan_stats,
        events: mode.events,
    })
}

enum TimelinePlans<'a> {
    Baseline,
    Lookahead { predicted: &'a [SourceRouting] },
    Injected { plans: &'a [Option<Plan>], prefetch: bool },
}

#[derive(Clone)]
struct Timeline {
    total: Seconds,
    per_layer: Vec<Seconds>,
    per_layer_exposed: Vec<Seconds>,
    plan_stats: Vec<PlanStats>,
    /// Executed (assignment, placement) per layer when it differs from the
    /// sharded baseline.
    executed: Vec<Option<(Assignment, Placement)>>,
    events: Vec<PhaseEvent>,
}

fn run_timeline(
    truth: &[SourceRouting],
    spec: &ClusterSpec,
    base: &Placement,
    plans: &TimelinePlans,
    record_events: bool,
) -> Result<Timeline> {
    let layers = truth.len();
    let ep = spec.ep;
    let mut events: Vec<PhaseEvent> = Vec::new();
    let emit_all = |phase: Phase, layer: usize, start: Seconds, end: Seconds,
                        events: &mut Vec<PhaseEvent>| {
        for rank in 0..ep {
            events.push(PhaseEvent {
                rank,
                layer,
                phase,
                start,
                end,
            });
        }
    };

    // Plan for the layer currently entering execution, produced during the
    // previous layer (lookahead) or injected.
    let mut current_plan: Option<Plan> = match plans {
        TimelinePlans::Injected { plans, .. } => plans[0].clone(),
        _ => None,
    };
    // Outstanding part-2 transfer per rank for the layer about to start.
    let mut pending_part2: Vec<Seconds> = vec![0.0; ep];

    let mut t = 0.0f64;
    let mut per_layer = Vec::with_capacity(layers);
    let mut per_layer_exposed = vec![0.0f64; layers];
    let mut plan_stats = vec![PlanStats::default(); layers];
    let mut executed: Vec<Option<(Assignment, Placement)>> = Vec::with_capacity(layers);

    for l in 0..layers {
        let attn_start = t;
        let attn_end = attn_start + spec.attention_duration;
        if record_events {
            emit_all(Phase::Attention, l, attn_start, attn_end, &mut events);
        }

        // Finish inbound transfers for this layer's plan during attention;
        // mask update follows. Overrun delays dispatch and is exposed.
        let mut ready = attn_end;
        if pending_part2.iter().any(|&p| p > 0.0) || current_plan.as_ref().is_some_and(|p| p.total_replicas() > 0) {
            for (rank, &p2) in pending_part2.iter().enumerate() {
                let p2_end = attn_start + p2;
                if record_events && p2 > 0.0 {
                    events.push(PhaseEvent {
                        rank,
                        layer: l,
                        phase: Phase::PrefetchPart2,
                        start: attn_start,
                        end: p2_end,
                    });
                }
                let update_end = p2_end + spec.update_cost;
                if record_events && spec.update_cost > 0.0 {
                    events.push(PhaseEvent {
                        rank,
                        layer: l,
                        phase: Phase::Update,
                        start: p2_end,
                        end: update_end,
                    });
                }
                ready = ready.max(update_end);
            }
        }
        let dispatch_start = ready;
        per_layer_exposed[l] += dispatch_start - attn_end;
        pending_part2 = vec![0.0; ep];

        // Effective assignment for this layer.
        let (assignment, placement) = match &current_plan {
            Some(plan) => {
                plan_stats[l] = PlanStats {
                    replicas: plan.total_replicas(),
                    iterations: plan.iterations_used,
                };
                (
                    apply_plan_to_routing(plan, &truth[l])?,
                    plan.placement.clone(),
                )
            }
            None => (init_locality_first(&truth[l], base), base.clone()),
        };
        let dur = layer_durations(&assignment, &placement, spec);
        let dispatch_end = dispatch_start + dur.dispatch;
        let moe_start = dispatch_end;
        let moe_end = moe_start + dur.compute;
        if record_events {
            emit_all(Phase::Dispatch, l, dispatch_start, dispatch_end, &mut events);
            emit_all(Phase::MoeCompute, l, moe_start, moe_end, &mut events);
        }

        // Auxiliary track for the next layer.
        let mut combine_start = moe_end;
        let mut next_plan: Option<Plan> = None;
        match plans {
            TimelinePlans::Lookahead { predicted } => {
                if l + 1 < layers {
                    let predict_end = dispatch_start + predict_duration(&truth[l], spec);
                    let windows = estimate_windows(moe_start, moe_end, predict_end, spec);
                    let plan = solve_plan(&predicted[l + 1], base, spec, &windows)?;
                    let plan_end =
                        predict_end + plan.iterations_used as f64 * spec.planner_duration_model;
                    if record_events {
                        emit_all(Phase::Predict, l, dispatch_start, predict_end, &mut events);
                        emit_all(Phase::Plan, l, predict_end, plan_end, &mut events);
                    }
                    // Solver spill past the compute phase delays combine.
                    combine_start = moe_end.max(plan_end);
                    per_layer_exposed[l] += combine_start - moe_end;
                    let part1_start = plan_end.max(moe_start);
                    let avail1 = (combine_start - part1_start).max(0.0);
                    for rank in 0..ep {
                        let trans =
                            transfer_latency(&plan.delta_in[rank], &plan.delta_out[rank], spec);
                        let part1 = trans.min(avail1);
                        if record_events && part1 > 0.0 {
                            events.push(PhaseEvent {
                                rank,
                                layer: l,
                                phase: Phase::PrefetchPart1,
                                start: part1_start,
                                end: part1_start + part1,
                            });
                        }
                        pending_part2[rank] = trans - part1;
                    }
                    next_plan = Some(plan);
                }
            }
            TimelinePlans::Injected { plans, prefetch } => {
                if l + 1 < layers {
                    if let Some(plan) = &plans[l + 1] {
                        if *prefetch {
                            let avail1 = (combine_start - moe_start).max(0.0);
                            for rank in 0..ep {
                                let trans = transfer_latency(
                                    &plan.delta_in[rank],
                                    &plan.delta_out[rank],
                                    spec,
                                );
                                let part1 = trans.min(avail1);
                                if record_events && part1 > 0.0 {
                                    events.push(PhaseEvent {
                                        rank,
                                        layer: l,
                                        phase: Phase::PrefetchPart1,
                                        start: moe_start,
                                        end: moe_start + part1,
                                    });
                                }
                                pending_part2[rank] = trans - part1;
                            }
                        }
                        next_plan = Some(plan.clone());
                    }
                }
            }
            TimelinePlans::Baseline => {}
        }

        let combine_end = combine_start + dur.combine;
        if record_events {
            emit_all(Phase::Combine, l, combine_start, combine_end, &mut events);
        }
        t = combine_end;
        per_layer.push(combine_end - attn_start);
        executed.push(if current_plan.is_some() {
            Some((assignment, placement))
        } else {
            None
        });
        current_plan = next_plan;
    }

    Ok(Timeline {
        total: t,
        per_layer,
        per_layer_exposed,
        plan_stats,
        executed,
        events,
    })
}

// ── Experiment driver ───────────────────────────────────────────────────

/// How predictions are produced at simulator scale.
#[derive(Debug, Clone)]
pub enum PredictorMode {
    /// Predictions equal the ground truth.
    Perfect,
    /// Seeded noisy oracle; sub-seeded per (step, layer).
    Noisy(NoisyOracleConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentMode {
    Baseline,
    Probe,
    /// Statistics-based balancing: collect loads for a warm-up window,
    /// apply a single plan, never replan. Transfers are amortized offline.
    OneShotHistory,
}

impl ExperimentMode {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Baseline => "baseline",
            ExperimentMode::Probe => "probe",
            ExperimentMode::OneShotHistory => "one_shot_history",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(ExperimentMode::Baseline),
            "probe" => Ok(ExperimentMode::Probe),
            "one_shot_history" => Ok(ExperimentMode::OneShotHistory),
            other => Err(Error::InvalidScript(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventsPolicy {
    None,
    FirstStep,
    All,
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub predictor: PredictorMode,
    pub one_shot_warmup: usize,
    pub events: EventsPolicy,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            predictor: PredictorMode::Noisy(NoisyOracleConfig::uniform_accuracy(0.9, 0)),
            one_shot_warmup: 100,
            events: EventsPolicy::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSeries {
    pub mode: ExperimentMode,
    pub steps: Vec<StepResult>,
    /// Tokens per second per step, `tokens_per_step / mode latency`.
    pub throughput: Vec<f64>,
}

fn predictions_for(
    truth: &[SourceRouting],
    step: usize,
    predictor: &PredictorMode,
) -> Result<Vec<SourceRouting>> {
    match predictor {
        PredictorMode::Perfect => Ok(truth.to_vec()),
        PredictorMode::Noisy(cfg) => truth
            .iter()
            .enumerate()
            .map(|(layer, routing)| {
                if layer == 0 {
                    // Layer 0 has no lookahead producer; its slot is unused.
                    return Ok(routing.clone());
                }
                let mut sub = *cfg;
                sub.seed = derive_seed(cfg.seed, "predict", &[step as u64, layer as u64]);
                noisy_oracle_predict(routing, &sub)
            })
            .collect(),
    }
}

/// Run a workload script under one or more execution modes and collect the
/// per-step results. The trace is regenerated per mode (generation is
/// deterministic), so long experiments never hold a full trace in memory.
pub fn run_experiment(
    script: &WorkloadScript,
    spec: &ClusterSpec,
    options: &ExperimentOptions,
    modes: &[ExperimentMode],
) -> Result<Vec<ExperimentSeries>> {
    let mut series = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut steps: Vec<StepResult> = Vec::with_capacity(script.steps);
        let mut one_shot_plans: Option<Vec<Option<Plan>>> = None;
        let mut accumulated: Vec<Vec<Vec<u64>>> = Vec::new();
        let base = Placement::sharded(spec.ep, spec.num_experts)?;

        for (step, truth) in TraceGenerator::new(script, spec)?.enumerate() {
            let record = match options.events {
                EventsPolicy::None => false,
                EventsPolicy::FirstStep => step == 0,
                EventsPolicy::All => true,
            };
            let result = match mode {
                ExperimentMode::Baseline => {
                    simulate_step(&truth, spec, PlanSource::Baseline, record)?
                }
                ExperimentMode::Probe => {
                    let predicted = predictions_for(&truth, step, &options.predictor)?;
                    simulate_step(
                        &truth,
                        spec,
                        PlanSource::Lookahead {
                            predicted: &predicted,
                            planning_enabled: true,
                        },
                        record,
                    )?
                }
                ExperimentMode::OneShotHistory => {
                    if step < options.one_shot_warmup {
                        // Warm-up: run baseline, accumulate per-layer loads.
                        if accumulated.is_empty() {
                            accumulated = truth
                                .iter()
                                .map(|r| vec![vec![0u64; r.num_experts()]; r.ep()])
                                .collect();
                        }
                        for (acc, routing) in accumulated.iter_mut().zip(truth.iter()) {
                            for (row, counts) in acc.iter_mut().zip(routing.counts().iter()) {
                                for (cell, &c) in row.iter_mut().zip(counts.iter()) {
                                    *cell += c;
                                }
                            }
                        }
                        simulate_step(&truth, spec, PlanSource::Baseline, record)?
                    } else {
                        if one_shot_plans.is_none() {
                            // Plan once from the accumulated statistics with
                            // unconstrained windows (the single transfer is
                            // amortized over the steady state).
                            let windows = vec![f64::INFINITY; spec.ep];
                            let mut plans = Vec::with_capacity(truth.len());
                            for acc in &accumulated {
                                let routing = SourceRouting::new(acc.clone())?;
                                plans.push(Some(solve_plan(&routing, &base, spec, &windows)?));
                            }
                            one_shot_plans = Some(plans);
                        }
                        let plans = one_shot_plans.as_ref().expect("set above");
                        simulate_step(
                            &truth,
                            spec,
                            PlanSource::Injected {
                                plans,
                                prefetch: false,
                            },
                            record,
                        )?
                    }
                }
            };
            steps.push(result);
        }
        let throughput = steps
            .iter()
            .map(|s| script.tokens_per_step as f64 / s.mode_latency)
            .collect();
        series.push(ExperimentSeries {
            mode,
            steps,
            throughput,
        });
    }
    Ok(series)
}
