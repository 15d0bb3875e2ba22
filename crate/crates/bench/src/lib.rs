//! Fixtures shared by the decode benchmarks.

use myodec::{DofVector, FeatureVector, CHANNELS, FEATURES_PER_CHANNEL, STEP_US};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw EMG for one window, channel-major.
pub fn emg_window(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..CHANNELS * len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A feature timeline at the full input width with smooth targets.
pub fn timeline(steps: usize, seed: u64) -> (Vec<FeatureVector>, Vec<DofVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = CHANNELS * FEATURES_PER_CHANNEL;
    let feats: Vec<FeatureVector> = (0..steps)
        .map(|k| FeatureVector { t_us: k as i64 * STEP_US, values: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() })
        .collect();
    let targets = (0..steps)
        .map(|k| DofVector::new(std::array::from_fn(|d| 0.5 + 0.4 * (k as f64 * 0.05 + d as f64).sin())))
        .collect();
    (feats, targets)
}
