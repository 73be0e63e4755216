//! Statistical oracles and toy-data fixtures shared by the integration tests.
#![allow(dead_code)]

use rawdiff::dataset::{synthesize, toy, Sample};
use rawdiff::noise::NoiseSource;
use rawdiff::raw::{invert_isp, IspParams, RawImage};
use rawdiff::rng::stream;
use rawdiff::tensor::Tensor;

/// Asymptotic 1% critical value of `sqrt(n) * D` for the one-sample KS test.
pub const KS_CRITICAL_1PCT: f64 = 1.6276;

/// One-sample Kolmogorov-Smirnov statistic `D` of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

pub fn ks_passes(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (bool, f64) {
    let d = ks_statistic(samples, cdf);
    (d * (samples.len() as f64).sqrt() < KS_CRITICAL_1PCT, d)
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn rel_err(found: f64, expected: f64) -> f64 {
    (found - expected).abs() / expected.abs()
}

/// Pearson chi-square statistic of `counts` against a uniform expectation.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Unprocessed toy image of `class`.
pub fn toy_raw(class: usize, variant: u64, size: usize) -> RawImage {
    invert_isp(&toy::toy_image(class, variant, size), &IspParams::default()).unwrap()
}

/// `per_class` training images for each of the 16 classes, with their
/// condition vectors.
pub fn toy_pool(per_class: u64, size: usize, embed_seed: u64) -> Vec<(RawImage, Tensor)> {
    let emb = toy::toy_embeddings(embed_seed);
    (0..toy::CLASSES)
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .map(|(c, i)| (toy_raw(c, i, size), emb.gather(&[c]).unwrap()))
        .collect()
}

/// `n` fixed noisy/clean crops cycling through the classes, drawn from image
/// variants starting at `first_variant` (disjoint from training variants).
pub fn toy_samples(
    n: usize,
    first_variant: u64,
    image_size: usize,
    patch: usize,
    noise: &NoiseSource,
    embed_seed: u64,
    seed: u64,
) -> Vec<Sample> {
    let emb = toy::toy_embeddings(embed_seed);
    let mut rng = stream(seed, 0);
    (0..n)
        .map(|k| {
            let c = k % toy::CLASSES;
            let clean = toy_raw(c, first_variant + k as u64, image_size);
            synthesize(&clean, Some(emb.gather(&[c]).unwrap()), noise, patch, &mut rng).unwrap()
        })
        .collect()
}
