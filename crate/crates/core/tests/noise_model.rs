mod common;

use common::{ks_passes, mean_var, rel_err};
use proptest::prelude::*;
use rawdiff::noise::*;
use rawdiff::raw::RawImage;
use rawdiff::rng::seeded;
use rawdiff::tensor::Tensor;
use statrs::distribution::{ContinuousCDF, Normal};

fn constant_field(z: f64, params: NoiseParams, n: usize, seed: u64) -> Vec<f64> {
    apply_noise_tensor(&Tensor::full([n], z), &params, false, &mut seeded(seed))
        .unwrap()
        .into_data()
}

#[test]
fn variance_on_constant_images_matches_within_two_percent() {
    for (z, shot, read) in [(0.5, 0.2, 0.1), (0.0, 0.3, 0.05), (1.0, 0.1, 0.0), (0.25, 0.31, 0.02)] {
        let p = NoiseParams::new(shot, read).unwrap();
        let (mean, var) = mean_var(&constant_field(z, p, 1_000_000, 17));
        let expected = read + shot * z;
        assert!(rel_err(var, expected) < 0.02, "z {z}: variance {var} vs {expected}");
        assert!((mean - z).abs() < 4.0 * (expected / 1e6).sqrt(), "z {z}: mean {mean}");
    }
}

#[test]
fn per_pixel_mean_is_within_three_sigma() {
    let mut rng = seeded(3);
    let clean = Tensor::new([4, 4, 4], (0..64).map(|i| i as f64 / 63.0).collect()).unwrap();
    let p = NoiseParams::new(0.1, 0.02).unwrap();
    let draws = 4000;
    let mut sums = vec![0.0; 64];
    for _ in 0..draws {
        let y = apply_noise_tensor(&clean, &p, false, &mut rng).unwrap();
        sums.iter_mut().zip(y.data()).for_each(|(s, v)| *s += v);
    }
    for (i, (s, z)) in sums.iter().zip(clean.data()).enumerate() {
        let sigma = p.variance(*z).sqrt();
        assert!((s / draws as f64 - z).abs() <= 3.0 * sigma / (draws as f64).sqrt(), "pixel {i}");
    }
}

#[test]
fn vanishing_parameters_leave_the_signal_unchanged() {
    let clean = RawImage::from_planes(Tensor::new([4, 2, 2], (0..16).map(|i| i as f64 / 15.0).collect()).unwrap()).unwrap();
    let p = NoiseParams::new(1e-300, 0.0).unwrap();
    let y = apply_noise(&clean, &p, &mut seeded(1)).unwrap();
    assert_eq!(y, clean);
}

#[test]
fn output_is_not_clipped_unless_asked() {
    let p = NoiseParams::new(0.1, 0.05).unwrap();
    let dark = constant_field(0.0, p, 1000, 2);
    assert!(dark.iter().any(|v| *v < 0.0));
    let clipped = apply_noise_tensor(&Tensor::full([1000], 0.0), &p, true, &mut seeded(2)).unwrap();
    assert!(clipped.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn invalid_parameters_and_inputs_are_rejected() {
    assert!(NoiseParams::new(0.0, 0.1).is_err());
    assert!(NoiseParams::new(-0.1, 0.1).is_err());
    assert!(NoiseParams::new(0.1, -1e-9).is_err());
    assert!(NoiseParams::new(f64::NAN, 0.1).is_err());
    assert!(NoiseParams::new(0.1, f64::INFINITY).is_err());
    let p = NoiseParams {
        lambda_shot: 0.0,
        lambda_read: 0.1,
    };
    assert!(apply_noise_tensor(&Tensor::full([3], 0.5), &p, false, &mut seeded(0)).is_err());
    let ok = NoiseParams::new(0.1, 0.1).unwrap();
    assert!(apply_noise_tensor(&Tensor::full([3], 1.5), &ok, false, &mut seeded(0)).is_err());
}

#[test]
fn shot_prior_is_log_uniform_by_ks() {
    let mut rng = seeded(11);
    let draws: Vec<NoiseParams> = (0..100_000).map(|_| sample_noise_params(&mut rng)).collect();
    let (lo, hi) = (LAMBDA_SHOT_MIN.ln(), LAMBDA_SHOT_MAX.ln());
    let logs: Vec<f64> = draws.iter().map(|p| p.lambda_shot.ln()).collect();
    assert!(logs.iter().all(|l| (lo - 1e-12..=hi + 1e-12).contains(l)));
    let (pass, d) = ks_passes(&logs, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0));
    assert!(pass, "KS statistic {d}");
}

#[test]
fn read_prior_residual_is_normal_by_ks() {
    let mut rng = seeded(12);
    let residuals: Vec<f64> = (0..100_000)
        .map(|_| {
            let p = sample_noise_params(&mut rng);
            p.lambda_read.ln() - (READ_SLOPE * p.lambda_shot.ln() + READ_OFFSET)
        })
        .collect();
    let normal = Normal::new(0.0, READ_LOG_VARIANCE.sqrt()).unwrap();
    let (pass, d) = ks_passes(&residuals, |x| normal.cdf(x));
    assert!(pass, "KS statistic {d}");
    // a standard-deviation reading of the 0.5 would fail the same test
    let wrong = Normal::new(0.0, 0.5).unwrap();
    assert!(!ks_passes(&residuals, |x| wrong.cdf(x)).0);
}

#[test]
fn conditional_read_mean_at_log_shot_minus_two() {
    let mut rng = seeded(13);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_log_read(-2.0, &mut rng)).sum::<f64>() / n as f64;
    assert!((mean - -2.95).abs() < 0.02, "mean {mean}");
}

#[test]
fn presets() {
    let lin = PresetInterpretation::Linear;
    assert_eq!(preset_level("0.1".parse().unwrap(), lin), NoiseParams::new(0.1, 0.2).unwrap());
    assert_eq!(preset_level("0.3".parse().unwrap(), lin), NoiseParams::new(0.3, 0.5).unwrap());
    assert!("0.2".parse::<NoiseLevel>().is_err());
    let log = preset_level(NoiseLevel::Low, PresetInterpretation::Log);
    assert!((log.lambda_shot - 0.1f64.exp()).abs() < 1e-15);
    assert!((log.lambda_read - 0.2f64.exp()).abs() < 1e-15);
    assert_eq!(PresetInterpretation::default(), lin);
}

#[test]
fn fixed_source_always_returns_its_parameters() {
    let p = NoiseParams::new(0.2, 0.1).unwrap();
    let src = NoiseSource::Fixed(p);
    let mut rng = seeded(0);
    assert!((0..10).all(|_| src.draw(&mut rng) == p));
}

proptest! {
    #[test]
    fn same_seed_same_field(seed in any::<u64>(), z in 0.0f64..=1.0) {
        let p = NoiseParams::new(0.1, 0.05).unwrap();
        let a = constant_field(z, p, 64, seed);
        prop_assert_eq!(&a, &constant_field(z, p, 64, seed));
        prop_assert_ne!(a, constant_field(z, p, 64, seed.wrapping_add(1)));
    }

    #[test]
    fn sampled_parameters_are_valid_and_in_range(seed in any::<u64>()) {
        let p = sample_noise_params(&mut seeded(seed));
        prop_assert!(p.validate().is_ok());
        prop_assert!(p.lambda_shot >= LAMBDA_SHOT_MIN * (1.0 - 1e-12));
        prop_assert!(p.lambda_shot <= LAMBDA_SHOT_MAX * (1.0 + 1e-12));
    }

    #[test]
    fn noise_preserves_shape(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let clean = RawImage::from_planes(Tensor::full([4, h, w], 0.3)).unwrap();
        let y = apply_noise(&clean, &NoiseParams::new(0.2, 0.1).unwrap(), &mut seeded(seed)).unwrap();
        prop_assert_eq!(y.planes().shape(), clean.planes().shape());
        prop_assert!(y.planes().all_finite());
    }
}
