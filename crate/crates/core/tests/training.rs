mod common;

use std::collections::BTreeMap;

use common::chi_square_uniform;
use rawdiff::checkpoint::{load_model, save_model};
use rawdiff::denoiser::{Denoiser, DenoiserConfig};
use rawdiff::optim::{Adam, AdamConfig};
use rawdiff::rng::seeded;
use rawdiff::tensor::{Dtype, ParamStore, Tensor};
use rawdiff::training::*;
use rawdiff::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        depth: 1,
        blocks_per_level: 1,
        cond_dim: 6,
        time_embed_dim: 4,
        patch_size: 8,
        uncond: false,
    }
}

fn batch(n: usize, seed: u64) -> Batch {
    let mut rng = seeded(seed);
    let x0 = Tensor::randn([n, 4, 4, 4], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let y = x0.zip_map(&Tensor::randn([n, 4, 4, 4], 0.1, &mut rng), |a, b| a + b).unwrap();
    Batch {
        x0,
        y,
        cond: Some(Tensor::randn([n, 6], 1.0, &mut rng)),
    }
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        diffusion_steps: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_is_zero_when_the_prediction_is_exact() {
    // A fresh network outputs 0, which is the model-domain value of mid gray.
    let mut b = batch(3, 1);
    b.x0 = Tensor::full([3, 4, 4, 4], 0.5);
    let mut trainer = Trainer::new(Denoiser::new(tiny(), 0).unwrap(), config(1)).unwrap();
    let stats = trainer.train_step(&b).unwrap();
    assert_eq!(stats.loss, 0.0);
    assert_eq!(stats.timesteps.len(), 3);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let run = |seed: u64| {
        let cfg = TrainConfig { seed, ..config(8) };
        let mut trainer = Trainer::new(Denoiser::new(tiny(), seed).unwrap(), cfg).unwrap();
        let losses = trainer.fit(&mut FixedBatch(batch(4, 2)), |_, _| Ok(())).unwrap();
        (losses, trainer.into_model().params)
    };
    let (la, pa) = run(5);
    let (lb, pb) = run(5);
    assert_eq!(la, lb);
    for name in pa.names() {
        assert_eq!(pa.get(name), pb.get(name));
    }
    assert_ne!(run(6).0, la);
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        ..config(150)
    };
    let mut trainer = Trainer::new(Denoiser::new(tiny(), 1).unwrap(), cfg).unwrap();
    let losses = trainer.fit(&mut FixedBatch(batch(4, 3)), |_, _| Ok(())).unwrap();
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn timesteps_cover_the_chain_uniformly() {
    let total = 64;
    let cfg = TrainConfig {
        diffusion_steps: total,
        batch_size: 64,
        ..config(50)
    };
    let mut trainer = Trainer::new(Denoiser::new(tiny(), 0).unwrap(), cfg).unwrap();
    let mut counts = vec![0u64; total];
    trainer
        .fit(&mut FixedBatch(batch(64, 4)), |s, _| {
            for &t in &s.timesteps {
                counts[t - 1] += 1;
            }
            Ok(())
        })
        .unwrap();
    assert_eq!(counts.iter().sum::<u64>(), 50 * 64);
    assert!(counts.iter().all(|c| *c > 0));
    let critical = ChiSquared::new((total - 1) as f64).unwrap().inverse_cdf(0.99);
    let stat = chi_square_uniform(&counts);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn divergence_reports_step_loss_and_timesteps() {
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..config(30)
    };
    let mut trainer = Trainer::new(Denoiser::new(tiny(), 0).unwrap(), cfg).unwrap();
    match trainer.fit(&mut FixedBatch(batch(4, 5)), |_, _| Ok(())) {
        Err(Error::Diverged { step, timesteps, .. }) => {
            assert!(step >= 1 && step <= 30);
            assert_eq!(timesteps.len(), 4);
            assert!(timesteps.iter().all(|t| (1..=16).contains(t)));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_and_batches_are_rejected() {
    let model = || Denoiser::new(tiny(), 0).unwrap();
    assert!(Trainer::new(model(), TrainConfig { learning_rate: 0.0, ..config(1) }).is_err());
    assert!(Trainer::new(model(), TrainConfig { diffusion_steps: 1, ..config(1) }).is_err());
    assert!(Trainer::new(model(), TrainConfig { mode: TrainMode::Lora, ..config(1) }).is_err());
    let mut t = Trainer::new(model(), config(1)).unwrap();
    let mut b = batch(2, 0);
    b.y = Tensor::zeros([2, 4, 4, 2]);
    assert!(t.train_step(&b).is_err());
}

#[test]
fn checkpoints_restore_the_model() {
    let mut trainer = Trainer::new(Denoiser::new(tiny(), 2).unwrap(), config(3)).unwrap();
    trainer.fit(&mut FixedBatch(batch(4, 6)), |_, _| Ok(())).unwrap();
    let model = trainer.into_model();
    let dir = tempfile::tempdir().unwrap();
    for dtype in [Dtype::F64, Dtype::F32] {
        let path = dir.path().join("m.rdck");
        save_model(&path, &model, 16, 3, dtype).unwrap();
        let (back, header) = load_model(&path).unwrap();
        assert_eq!((header.diffusion_steps, header.step), (16, 3));
        assert_eq!(back.config, model.config);
        for name in model.params.names() {
            let diff = back.params.get(name).unwrap().max_abs_diff(model.params.get(name).unwrap());
            assert!(if dtype == Dtype::F64 { diff == 0.0 } else { diff < 1e-6 }, "{name}");
        }
    }
}

#[test]
fn metrics_log_writes_one_json_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut log = MetricsLog::create(&path).unwrap();
    for step in 1..=3 {
        log.record(step, 0.5 / step as f64, 1e-3).unwrap();
    }
    drop(log);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["step"], 3);
    assert_eq!(lines[0]["loss"], 0.5);
    assert!(lines[1]["wall_time"].as_f64().unwrap() >= 0.0);
}

#[test]
fn smoothing_is_a_trailing_mean() {
    let s = smoothed(&[4.0, 2.0, 0.0, 6.0], 2);
    assert_eq!(s, vec![4.0, 3.0, 1.0, 3.0]);
}

fn scalar(v: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::from_vec(vec![v]), true);
    p
}

fn grad(g: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![g]))])
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut p = scalar(1.5);
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    for _ in 0..5 {
        opt.update(&mut p, &grad(0.0)).unwrap();
    }
    assert_eq!(p.get("w").unwrap().data()[0], 1.5);

    for g in [1e-6, 0.3, -40.0] {
        let mut p = scalar(0.0);
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        opt.update(&mut p, &grad(g)).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!(w.abs() <= 1e-3 * (1.0 + 1e-9), "{g}: {w}");
        assert!(w * g < 0.0);
    }
}

#[test]
fn adam_converges_on_a_scalar_quadratic() {
    let mut p = scalar(0.0);
    let mut opt = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    })
    .unwrap();
    for _ in 0..5000 {
        let w = p.get("w").unwrap().data()[0];
        opt.update(&mut p, &grad(2.0 * (w - 3.0))).unwrap();
    }
    let w = p.get("w").unwrap().data()[0];
    assert!((w - 3.0).abs() < 1e-6, "{w}");
}

#[test]
fn adam_leaves_frozen_parameters_alone() {
    let mut p = scalar(2.0);
    p.set_trainable("w", false).unwrap();
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    opt.update(&mut p, &grad(5.0)).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 2.0);
    assert!(Adam::new(AdamConfig { lr: -1.0, ..AdamConfig::default() }).is_err());
}
