//! Synthetic cross-layer drift task for exercising the trainable gate.
//!
//! A fixed random teacher router stands in for the target layer's router.
//! Next-layer hidden states are the previous layer's states plus a smooth
//! low-rank drift (a few tanh-bent directions) and a little isotropic
//! noise. The gate sees the previous layer's states and is distilled
//! against the teacher's logits on the drifted states, so the residual MLP
//! must learn the drift while the frozen prior contributes the router
//! itself. The drift scale controls how bad the untrained prior is; the
//! noise scale sets the reachable ceiling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::predictor::{distill_step, fidelity_from_logits, gate_forward, FidelityMetrics, LookaheadGate};
use crate::util::derive_seed;

fn default_input_dim() -> usize {
    32
}
fn default_num_experts() -> usize {
    16
}
fn default_top_k() -> usize {
    4
}
fn default_drift_scale() -> f64 {
    3.0
}
fn default_drift_rank() -> usize {
    2
}
fn default_noise_scale() -> f64 {
    0.05
}
fn default_train_tokens() -> usize {
    4096
}
fn default_eval_tokens() -> usize {
    2048
}
fn default_epochs() -> usize {
    300
}
fn default_learning_rate() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Residual width; defaults to a quarter of the input dimension.
    #[serde(default)]
    pub hidden_width: Option<usize>,
    #[serde(default = "default_num_experts")]
    pub num_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_drift_scale")]
    pub drift_scale: f64,
    #[serde(default = "default_drift_rank")]
    pub drift_rank: usize,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_train_tokens")]
    pub train_tokens: usize,
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl SyntheticTaskConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden_width.unwrap_or((self.input_dim / 4).max(1))
    }
}

/// The frozen teacher and drift field.
pub struct SyntheticTask {
    cfg: SyntheticTaskConfig,
    teacher_weight: Vec<f64>,
    teacher_bias: Vec<f64>,
    drift_out: Vec<Vec<f64>>,
    drift_in: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(cfg: &SyntheticTaskConfig) -> Self {
        let d = cfg.input_dim;
        let e = cfg.num_experts;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "task", &[]));
        let scale = 1.0 / (d as f64).sqrt();
        let normal = StandardNormal;
        let teacher_weight: Vec<f64> =
            (0..e * d).map(|_| <f64 as From<_>>::from(0.0) + Distribution::<f64>::sample(&normal, &mut rng) * scale).collect();
        let teacher_bias: Vec<f64> =
            (0..e).map(|_| Distribution::<f64>::sample(&normal, &mut rng) * 0.1).collect();
        let unit = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..d).map(|_| Distribution::<f64>::sample(&normal, rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        };
        let drift_out: Vec<Vec<f64>> = (0..cfg.drift_rank).map(|_| unit(&mut rng)).collect();
        let drift_in: Vec<Vec<f64>> = (0..cfg.drift_rank).map(|_| unit(&mut rng)).collect();
        Self {
            cfg: cfg.clone(),
            teacher_weight,
            teacher_bias,
            drift_out,
            drift_in,
        }
    }

    pub fn teacher_router(&self) -> (Vec<f64>, Vec<f64>) {
        (self.teacher_weight.clone(), self.teacher_bias.clone())
    }

    /// Sample a batch: previous-layer hidden states and the teacher's
    /// logits on the drifted next-layer states.
    pub fn sample_batch(&self, tokens: usize, stream: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = self.cfg.input_dim;
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.cfg.seed, "batch", &[stream]));
        let normal = StandardNormal;
        let mut hidden_prev = Vec::with_capacity(tokens);
        let mut teacher_logits = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            let h: Vec<f64> = (0..d).map(|_| Distribution::<f64>::sample(&normal, &mut rng)).collect();
            let mut next = h.clone();
            for (u, v) in self.drift_out.iter().zip(self.drift_in.iter()) {
                let a: f64 = v.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
                let bend = self.cfg.drift_scale * a.tanh();
                for (n, ui) in next.iter_mut().zip(u.iter()) {
                    *n += bend * ui;
                }
            }
            for n in next.iter_mut() {
                *n += self.cfg.noise_scale * Distribution::<f64>::sample(&normal, &mut rng);
            }
            teacher_logits.push(self.logits(&next));
            hidden_prev.push(h);
        }
        (hidden_prev, teacher_logits)
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.cfg.input_dim;
        (0..self.cfg.num_experts)
            .map(|i| {
                self.teacher_weight[i * d..(i + 1) * d]
                    .iter()
                    .zip(h.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.teacher_bias[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub fidelity: FidelityMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub untrained: FidelityMetrics,
    pub epochs: Vec<EpochStats>,
    pub final_fidelity: FidelityMetrics,
}

/// Distill a gate on the synthetic drift task; returns the trained gate and
/// the per-epoch metric trace.
pub fn train_gate(cfg: &SyntheticTaskConfig) -> Result<(LookaheadGate, TrainReport)> {
    let task = SyntheticTask::new(cfg);
    let (teacher_weight, teacher_bias) = task.teacher_router();
    let mut gate = LookaheadGate::from_router(
        teacher_weight,
        teacher_bias,
        cfg.input_dim,
        cfg.hidden_width(),
        derive_seed(cfg.seed, "gate-init", &[]),
    )?;

    let (train_h, train_t) = task.sample_batch(cfg.train_tokens, 0);
    let (eval_h, eval_t) = task.sample_batch(cfg.eval_tokens, 1);

    let evaluate = |gate: &LookaheadGate| -> Result<FidelityMetrics> {
        let predicted = gate_forward(&eval_h, gate)?;
        fidelity_from_logits(&predicted, &eval_t, cfg.top_k)
    };

    let untrained = evaluate(&gate)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = distill_step(&train_h, &train_t, &mut gate, cfg.learning_rate)?;
        let fidelity = evaluate(&gate)?;
        epochs.push(EpochStats {
            epoch,
            loss,
            fidelity,
        });
    }
    let final_fidelity = epochs.last().map(|e| e.fidelity).unwrap_or(untrained);
    Ok((
        gate,
        TrainReport {
            untrained,
            epochs,
            final_fidelity,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_batches_are_deterministic() {
        let cfg = SyntheticTaskConfig {
            train_tokens: 16,
            ..SyntheticTaskConfig::default()
        };
        let task = SyntheticTask::new(&cfg);
        let (h1, t1) = task.sample_batch(16, 0);
        let (h2, t2) = task.sample_batch(16, 0);
        assert_eq!(h1, h2);
        assert_eq!(t1, t2);
        let (h3, _) = task.sample_batch(16, 1);
        assert_ne!(h1, h3);
    }

    #[test]
    fn zero_epochs_returns_untrained_metrics() {
        let cfg = SyntheticTaskConfig {
            epochs: 0,
            train_tokens: 64,
            eval_tokens: 256,
            ..SyntheticTaskConfig::default()
        };
        let (_, report) = train_gate(&cfg).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.final_fidelity, report.untrained);
    }

    #[test]
    fn training_beats_untrained_prior() {
        let cfg = SyntheticTaskConfig {
            epochs: 120,
            train_tokens: 1024,
            eval_tokens: 1024,
            ..SyntheticTaskConfig::default()
        };
        let (_, report) = train_gate(&cfg).unwrap();
        assert!(
            report.final_fidelity.topk_accuracy > report.untrained.topk_accuracy + 0.02,
            "untrained {} vs trained {}",
            report.untrained.topk_accuracy,
            report.final_fidelity.topk_accuracy
        );
    }
}
