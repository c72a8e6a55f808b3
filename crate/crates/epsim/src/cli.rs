//! Command-line entry points: scenario loading, experiment orchestration,
//! and result emission. All randomness funnels through the scenario seed
//! (overridable with `--seed`); outputs are written atomically and listed
//! with content hashes in a run manifest, so a manifest plus the scenario
//! file reproduces a run byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::IRSeries;
use crate::perf::{moe_step_latency, write_breakdown_csv};
use crate::planner::{init_locality_first, plan as solve_plan};
use crate::predictor::{train_gate, NoisyOracleConfig, SyntheticTaskConfig};
use crate::sim::{
    planning_windows, run_experiment, write_events_csv, EventsPolicy, ExperimentMode,
    ExperimentOptions, ExperimentSeries, PredictorMode,
};
use crate::types::Scenario;
use crate::util::derive_seed;
use crate::workload::TraceGenerator;

#[derive(Parser)]
#[command(
    name = "epsim",
    about = "Planner and discrete-event simulator for expert-parallel MoE inference"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan one layer's expert replication for a scenario and report the
    /// imbalance before and after.
    Plan(PlanArgs),
    /// Simulate a workload script under one or more execution modes.
    Simulate(SimulateArgs),
    /// Train the lookahead gate on the synthetic drift task.
    TrainPredictor(TrainArgs),
    /// Sweep batch sizes and emit the throughput/latency frontier.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory (created if missing).
    #[arg(long, env = "EPSIM_OUT", default_value = "epsim-out")]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Scenario JSON with `cluster` and either `routing` or `script`.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the workload script seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON with `cluster` and `script`.
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated modes: baseline, probe, one_shot_history.
    #[arg(long, default_value = "baseline,probe")]
    mode: String,
    /// Steps to simulate (defaults to the script length; more is an error).
    #[arg(long)]
    steps: Option<usize>,
    /// Override the workload script seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Predictor: "perfect" or a noisy-oracle accuracy in [0,1].
    #[arg(long, default_value = "0.9")]
    predictor: String,
    /// Event log policy: none, first, all.
    #[arg(long, default_value = "first")]
    events: String,
    /// Warm-up steps for the one-shot-history mode.
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthetic-task config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the task seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario JSON with `cluster` and `script`.
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated global batch sizes to sweep.
    #[arg(long)]
    batches: String,
    /// Steps per sweep point (defaults to the script length).
    #[arg(long)]
    steps: Option<usize>,
    /// Override the workload script seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Predictor: "perfect" or a noisy-oracle accuracy in [0,1].
    #[arg(long, default_value = "0.9")]
    predictor: String,
    #[command(flatten)]
    out: OutDir,
}

/// Parse the process arguments and run; returns the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Plan(args) => cmd_plan(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::TrainPredictor(args) => cmd_train_predictor(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Json(_)
                | Error::InvalidSpec(_)
                | Error::InvalidRouting(_)
                | Error::InvalidPlacement(_)
                | Error::InvalidScript(_) => 2,
                _ => 1,
            }
        }
    }
}

// ── Shared plumbing ─────────────────────────────────────────────────────

#[derive(Serialize)]
struct ArtifactEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    scenario: Option<String>,
    modes: Vec<String>,
    steps: Option<usize>,
    seed: Option<u64>,
    artifacts: Vec<ArtifactEntry>,
}

struct Emitter {
    dir: PathBuf,
    artifacts: Vec<ArtifactEntry>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!("{name}.tmp"));
        std::fs::write(&tmp, contents)?;
        std::fs::rename(&tmp, &path)?;
        let mut hasher = Sha256::new();
        hasher.update(contents);
        self.artifacts.push(ArtifactEntry {
            name: name.to_string(),
            sha256: format!("{:x}", hasher.finalize()),
        });
        Ok(())
    }

    fn finish(mut self, manifest: RunManifest) -> Result<()> {
        let mut manifest = manifest;
        manifest.artifacts = std::mem::take(&mut self.artifacts);
        let body = serde_json::to_string_pretty(&manifest)?;
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn load_scenario(path: &Path, seed_override: Option<u64>) -> Result<Scenario> {
    let mut scenario = Scenario::load(path)?;
    if let (Some(seed), Some(script)) = (seed_override, scenario.script.as_mut()) {
        script.seed = seed;
    }
    let report = scenario.validate();
    if !report.is_empty() {
        return Err(Error::InvalidScript(format!(
            "scenario violates invariants: {}",
            report.join("; ")
        )));
    }
    Ok(scenario)
}

fn parse_predictor(spec_seed: u64, arg: &str) -> Result<PredictorMode> {
    if arg == "perfect" {
        return Ok(PredictorMode::Perfect);
    }
    let accuracy: f64 = arg.parse().map_err(|_| {
        Error::InvalidScript(format!(
            "predictor must be 'perfect' or an accuracy in [0,1], got '{arg}'"
        ))
    })?;
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::InvalidScript(format!(
            "predictor accuracy {accuracy} outside [0,1]"
        )));
    }
    Ok(PredictorMode::Noisy(NoisyOracleConfig::uniform_accuracy(
        accuracy,
        derive_seed(spec_seed, "noisy-oracle", &[]),
    )))
}

fn steps_csv(series: &ExperimentSeries, tokens_per_step: u64) -> String {
    let mut out = String::from(
        "step,mode,latency_s,baseline_s,throughput_tps,exposed_s,ir_pre,ir_post,latency_skew_pre,latency_skew_post,replicas,iterations\n",
    );
    for (step, r) in series.steps.iter().enumerate() {
        let exposed: f64 = r.per_layer_exposed.iter().sum();
        let replicas: usize = r.plan_stats.iter().map(|p| p.replicas).sum();
        let iterations: usize = r.plan_stats.iter().map(|p| p.iterations).sum();
        let _ = writeln!(
            out,
            "{step},{},{},{},{},{exposed},{},{},{},{},{replicas},{iterations}",
            series.mode.name(),
            r.mode_latency,
            r.baseline_latency,
            tokens_per_step as f64 / r.mode_latency,
            crate::util::mean(&r.ir_tokens_pre),
            crate::util::mean(&r.ir_tokens_post),
            crate::util::mean(&r.latency_skew_pre),
            crate::util::mean(&r.latency_skew_post),
        );
    }
    out
}

// ── Commands ────────────────────────────────────────────────────────────

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario, args.seed)?;
    let spec = &scenario.cluster;
    let routing = match (&scenario.routing, &scenario.script) {
        (Some(r), _) => r.clone(),
        (None, Some(script)) => {
            // First step, first layer of the scripted workload.
            let mut gen = TraceGenerator::new(script, spec)?;
            gen.next()
                .ok_or_else(|| Error::InvalidScript("script generated no steps".into()))?
                .remove(0)
        }
        (None, None) => {
            return Err(Error::InvalidScript(
                "scenario needs a routing matrix or a workload script to plan against".into(),
            ))
        }
    };
    let base = scenario.effective_placement()?;
    let windows = planning_windows(&routing, spec)?;
    let plan = solve_plan(&routing, &base, spec, &windows)?;

    // Pre/post imbalance on token loads and modeled compute latencies.
    let sharded = init_locality_first(&routing, &base);
    let pre_loads = crate::metrics::rank_loads_sharded(&routing, &base);
    let post_loads = crate::metrics::rank_loads_assigned(&plan.assignment);
    let pre_ir = crate::metrics::imbalance_ratio(&pre_loads)?;
    let post_ir = crate::metrics::imbalance_ratio(&post_loads)?;
    let pre_lat = crate::perf::rank_compute_latency(&sharded, &base, spec)?;
    let post_lat =
        crate::perf::rank_compute_latency(&plan.assignment, &plan.placement, spec)?;
    let pre_skew = crate::metrics::imbalance_ratio_f(&pre_lat)?;
    let post_skew = crate::metrics::imbalance_ratio_f(&post_lat)?;

    let mut emitter = Emitter::new(&args.out.out)?;
    emitter.write(
        "plan.json",
        serde_json::to_string_pretty(&plan.to_file())?.as_bytes(),
    )?;
    let (_, breakdown) = moe_step_latency(&plan.assignment, &plan.placement, spec)?;
    let mut csv = Vec::new();
    write_breakdown_csv(&mut csv, &breakdown)?;
    emitter.write("rank_breakdown.csv", &csv)?;

    println!(
        "IR {pre_ir:.2} -> {post_ir:.2}, {} replicas",
        plan.total_replicas()
    );
    println!("latency skew {pre_skew:.2} -> {post_skew:.2}");
    println!(
        "feasibility: {} ({} iterations)",
        if plan.is_feasible() { "ok" } else { "DEGRADED" },
        plan.iterations_used
    );

    let degraded = !plan.is_feasible();
    emitter.finish(RunManifest {
        command: "plan".into(),
        scenario: Some(args.scenario.display().to_string()),
        modes: Vec::new(),
        steps: None,
        seed: args.seed,
        artifacts: Vec::new(),
    })?;
    if degraded {
        return Err(Error::InvalidPlan(
            "emitted plan violates its hiding windows".into(),
        ));
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario, args.seed)?;
    let spec = &scenario.cluster;
    let mut script = scenario
        .script
        .clone()
        .ok_or_else(|| Error::InvalidScript("scenario has no workload script".into()))?;
    if let Some(steps) = args.steps {
        if steps > script.steps {
            return Err(Error::InvalidScript(format!(
                "--steps {steps} exceeds script length {}",
                script.steps
            )));
        }
        script.steps = steps;
    }
    let modes: Vec<ExperimentMode> = args
        .mode
        .split(',')
        .map(|m| ExperimentMode::parse(m.trim()))
        .collect::<Result<_>>()?;
    let options = ExperimentOptions {
        predictor: parse_predictor(script.seed, &args.predictor)?,
        one_shot_warmup: args.warmup,
        events: match args.events.as_str() {
            "none" => EventsPolicy::None,
            "first" => EventsPolicy::FirstStep,
            "all" => EventsPolicy::All,
            other => {
                return Err(Error::InvalidScript(format!(
                    "unknown events policy '{other}'"
                )))
            }
        },
    };

    let series = run_experiment(&script, spec, &options, &modes)?;

    let mut emitter = Emitter::new(&args.out.out)?;
    let mut summary = serde_json::Map::new();
    for s in &series {
        emitter.write(
            &format!("steps_{}.csv", s.mode.name()),
            steps_csv(s, script.tokens_per_step).as_bytes(),
        )?;
        let mut ir = IRSeries::default();
        for (i, r) in s.steps.iter().enumerate() {
            ir.push(
                i,
                crate::util::mean(&r.ir_tokens_post),
                crate::util::mean(&r.latency_skew_post),
            );
        }
        let mut ir_csv = Vec::new();
        ir.write_csv(&mut ir_csv)?;
        emitter.write(&format!("ir_{}.csv", s.mode.name()), &ir_csv)?;

        let events: Vec<_> = s
            .steps
            .iter()
            .flat_map(|r| r.events.iter().cloned())
            .collect();
        if !events.is_empty() {
            let mut ev_csv = Vec::new();
            write_events_csv(&mut ev_csv, &events)?;
            emitter.write(&format!("events_{}.csv", s.mode.name()), &ev_csv)?;
        }

        let mean_latency =
            s.steps.iter().map(|r| r.mode_latency).sum::<f64>() / s.steps.len() as f64;
        let mean_tps = s.throughput.iter().sum::<f64>() / s.throughput.len() as f64;
        println!(
            "{}: mean latency {mean_latency:.6e} s, mean throughput {mean_tps:.1} tok/s",
            s.mode.name()
        );
        summary.insert(
            s.mode.name().to_string(),
            serde_json::json!({
                "mean_latency_s": mean_latency,
                "mean_throughput_tps": mean_tps,
                "steps": s.steps.len(),
            }),
        );
    }
    emitter.write(
        "summary.json",
        serde_json::to_string_pretty(&serde_json::Value::Object(summary))?.as_bytes(),
    )?;
    emitter.finish(RunManifest {
        command: "simulate".into(),
        scenario: Some(args.scenario.display().to_string()),
        modes: modes.iter().map(|m| m.name().to_string()).collect(),
        steps: Some(script.steps),
        seed: args.seed,
        artifacts: Vec::new(),
    })?;
    Ok(())
}

fn cmd_train_predictor(args: &TrainArgs) -> Result<()> {
    let mut cfg: SyntheticTaskConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => SyntheticTaskConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let (gate, report) = train_gate(&cfg)?;

    let mut emitter = Emitter::new(&args.out.out)?;
    emitter.write(
        "gate_checkpoint.json",
        serde_json::to_string(&gate)?.as_bytes(),
    )?;
    let mut csv = String::from("epoch,loss,topk_accuracy,top_half_k_hit,twice_topk_recall\n");
    for e in &report.epochs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            e.epoch,
            e.loss,
            e.fidelity.topk_accuracy,
            e.fidelity.top_half_k_hit,
            e.fidelity.twice_topk_recall
        );
    }
    emitter.write("fidelity.csv", csv.as_bytes())?;

    let u = report.untrained;
    let f = report.final_fidelity;
    println!(
        "untrained: topk {:.4}, top-half {:.4}, 2k recall {:.4}",
        u.topk_accuracy, u.top_half_k_hit, u.twice_topk_recall
    );
    println!(
        "trained:   topk {:.4}, top-half {:.4}, 2k recall {:.4} ({} epochs)",
        f.topk_accuracy,
        f.top_half_k_hit,
        f.twice_topk_recall,
        report.epochs.len()
    );
    emitter.finish(RunManifest {
        command: "train-predictor".into(),
        scenario: args.config.as_ref().map(|p| p.display().to_string()),
        modes: Vec::new(),
        steps: Some(cfg.epochs),
        seed: args.seed,
        artifacts: Vec::new(),
    })?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario, args.seed)?;
    let spec = &scenario.cluster;
    let mut script = scenario
        .script
        .clone()
        .ok_or_else(|| Error::InvalidScript("scenario has no workload script".into()))?;
    if let Some(steps) = args.steps {
        if steps > script.steps {
            return Err(Error::InvalidScript(format!(
                "--steps {steps} exceeds script length {}",
                script.steps
            )));
        }
        script.steps = steps;
    }
    let batches: Vec<u64> = args
        .batches
        .split(',')
        .map(|b| {
            b.trim().parse::<u64>().map_err(|_| {
                Error::InvalidScript(format!("invalid batch size '{}'", b.trim()))
            })
        })
        .collect::<Result<_>>()?;
    if batches.is_empty() {
        return Err(Error::InvalidScript("no batch sizes given".into()));
    }
    let options = ExperimentOptions {
        predictor: parse_predictor(script.seed, &args.predictor)?,
        events: EventsPolicy::None,
        ..ExperimentOptions::default()
    };
    let modes = [ExperimentMode::Baseline, ExperimentMode::Probe];

    let mut csv = String::from("batch,mode,mean_latency_s,mean_throughput_tps\n");
    for &batch in &batches {
        let mut point = script.clone();
        point.tokens_per_step = batch;
        let series = run_experiment(&point, spec, &options, &modes)?;
        for s in &series {
            let mean_latency =
                s.steps.iter().map(|r| r.mode_latency).sum::<f64>() / s.steps.len() as f64;
            let mean_tps = s.throughput.iter().sum::<f64>() / s.throughput.len() as f64;
            let _ = writeln!(csv, "{batch},{},{mean_latency},{mean_tps}", s.mode.name());
            println!(
                "batch {batch} {}: latency {mean_latency:.6e} s, throughput {mean_tps:.1} tok/s",
                s.mode.name()
            );
        }
    }
    let mut emitter = Emitter::new(&args.out.out)?;
    emitter.write("sweep.csv", csv.as_bytes())?;
    emitter.finish(RunManifest {
        command: "sweep".into(),
        scenario: Some(args.scenario.display().to_string()),
        modes: modes.iter().map(|m| m.name().to_string()).collect(),
        steps: Some(script.steps),
        seed: args.seed,
        artifacts: Vec::new(),
    })?;
    Ok(())
}
