//! Small deterministic helpers shared across modules: stable sub-seed
//! derivation and integer apportionment.

use sha2::{Digest, Sha256};

/// Derive a sub-seed from a root seed, a purpose string, and an index path.
///
/// All randomness in the crate funnels through a single root seed; every
/// consumer (workload step, noisy-oracle layer, gate init, ...) gets its own
/// stream via this function. SHA-256 keeps the derivation stable across
/// platforms and releases.
pub fn derive_seed(root: u64, purpose: &str, path: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(purpose.as_bytes());
    for p in path {
        hasher.update([0xfe]);
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Split `total` into integer parts proportional to `weights` using the
/// largest-remainder rule. Ties go to the lower index, so the result is
/// deterministic. Zero-weight entries receive zero.
pub fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 || total == 0 {
        return vec![0; n];
    }
    let mut parts = vec![0u64; n];
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(n);
    let mut assigned: u64 = 0;
    for (i, &w) in weights.iter().enumerate() {
        let prod = total as u128 * w as u128;
        parts[i] = (prod / sum) as u64;
        assigned += parts[i];
        rems.push((prod % sum, i));
    }
    // Largest remainder first; lower index wins ties.
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - assigned;
    for (_, i) in rems {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Mean of a float slice. Panics on empty input.
pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of empty slice");
    values.iter().sum::<f64>() / values.len() as f64
}

/// Index of the maximum value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the minimum value; ties go to the lower index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
