use epsim::predictor::{train_gate, SyntheticTaskConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let cfg = SyntheticTaskConfig::default();
    let (_, report) = train_gate(&cfg).unwrap();
    let u = report.untrained;
    let f = report.final_fidelity;
    println!(
        "default: untrained {:.4} -> trained {:.4} half {:.4} 2k {:.4} ({:?})",
        u.topk_accuracy, f.topk_accuracy, f.top_half_k_hit, f.twice_topk_recall, t0.elapsed()
    );
}
