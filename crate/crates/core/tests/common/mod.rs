//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use icount::counter::{backward, forward, forward_trace, Conv3x3, FeatureMap, HeadWeights, RefinementParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;

pub struct Fixture {
    pub features: FeatureMap,
    pub weights: HeadWeights,
    pub params: RefinementParams,
    pub upstream: Vec<f64>,
}

pub fn fixture(seed: u64, channels: usize, size: usize, upsample: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv1 = Conv3x3::zeros(channels);
    conv1.kernel.iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
    conv1.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.2));
    let weights = HeadWeights {
        conv0: Conv3x3::identity(channels),
        conv1,
        proj: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        proj_bias: rng.random_range(0.0..0.3),
        upsample,
    };
    let n = size * size;
    let vals = (0..channels * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = FeatureMap::new(channels, size, size, vals).unwrap();
    let params = RefinementParams {
        ch_scale: (0..channels).map(|_| rng.random_range(0.7..1.3)).collect(),
        ch_bias: (0..channels).map(|_| rng.random_range(-0.2..0.2)).collect(),
        sp_scale: (0..n).map(|_| rng.random_range(0.7..1.3)).collect(),
        sp_bias: (0..n).map(|_| rng.random_range(-0.2..0.2)).collect(),
    };
    let out = n * upsample * upsample;
    let upstream = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    Fixture {
        features,
        weights,
        params,
        upstream,
    }
}

pub fn loss(fx: &Fixture, params: &RefinementParams) -> f64 {
    let d = forward(&fx.features, params, &fx.weights);
    d.values().iter().zip(&fx.upstream).map(|(a, b)| a * b).sum()
}

fn relu_pattern(fx: &Fixture, params: &RefinementParams) -> Vec<bool> {
    let t = forward_trace(&fx.features, params, &fx.weights);
    t.refined
        .values()
        .iter()
        .chain(t.conv.values())
        .chain(&t.projection)
        .map(|&v| v > 0.0)
        .collect()
}

/// Max relative error per block and the number of entries skipped because a
/// ReLU switched inside the finite-difference stencil.
pub fn check(fx: &Fixture) -> ([f64; 4], usize) {
    let analytic = backward(&fx.features, &fx.params, &fx.weights, &fx.upstream);
    let mut errors = [0.0; 4];
    let mut skipped = 0;
    #[allow(clippy::needless_range_loop)]
    for block in 0..4 {
        let an = analytic.blocks()[block];
        let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let mut worst = 0.0f64;
        for i in 0..an.len() {
            let mut plus = fx.params.clone();
            let mut minus = fx.params.clone();
            plus.blocks_mut()[block][i] += STEP;
            minus.blocks_mut()[block][i] -= STEP;
            if relu_pattern(fx, &plus) != relu_pattern(fx, &minus) {
                skipped += 1;
                continue;
            }
            let fd = (loss(fx, &plus) - loss(fx, &minus)) / (2.0 * STEP);
            worst = worst.max((fd - an[i]).abs());
        }
        errors[block] = worst / scale;
    }
    (errors, skipped)
}

/// Runs the oracle over `count` random 6x16x16 fixtures; returns the worst
/// relative error seen in any block and the skipped fraction.
pub fn gradient_suite(count: u64) -> (f64, f64) {
    let (mut worst, mut skipped, mut total) = (0.0f64, 0, 0);
    for seed in 0..count {
        let fx = fixture(seed, 6, 16, 1);
        let (errors, s) = check(&fx);
        worst = errors.iter().fold(worst, |m, &e| m.max(e));
        skipped += s;
        total += fx.params.len();
    }
    (worst, skipped as f64 / total as f64)
}
