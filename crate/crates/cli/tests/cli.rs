use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rawdiff::config::RunConfig;
use rawdiff::dataset::Manifest;
use rawdiff::raw::RawImage;
use serde_json::Value;

fn rawdiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawdiff"))
        .args(args)
        .current_dir(cwd)
        .env("RAWDIFF_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = rawdiff(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Toy corpus plus prepared 0.1-level pairs in `dir`.
fn prepared(dir: &Path) {
    ok(&["toy", "--out", "toy", "--train", "1", "--test", "1", "--size", "32"], dir);
    ok(
        &["prepare", "--manifest", "toy/manifest.json", "--out", "prep", "--noise-level", "0.1", "--seed", "4"],
        dir,
    );
}

const TINY: &str = "model.base_channels = 8\nmodel.blocks_per_level = 1\nmodel.patch_size = 16\n\
train.batch_size = 4\ntrain.diffusion_steps = 16\ndata.noise_level = 0.1\n";

#[test]
fn usage_errors_exit_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--nope"][..], &["frobnicate"], &["render"]] {
        let out = rawdiff(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[usage]: "), "{err}");
    }
    let out = rawdiff(&["train", "--out", "r", "--set", "model.nope=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_and_corrupt_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = rawdiff(&["render", "--input", "missing.rdrw", "--out", "x.png"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(dir.path().join("junk.rdrw"), b"not a raw file").unwrap();
    let out = rawdiff(&["render", "--input", "junk.rdrw", "--out", "x.png"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[data]: "), "{err}");
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    std::fs::write(dir.path().join("cfg.txt"), format!("{TINY}train.steps = 30\ntrain.learning_rate = 1e300\n")).unwrap();
    let out = rawdiff(&["train", "--config", "cfg.txt", "--manifest", "prep/manifest.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.lines().last().unwrap().starts_with("error[numeric]: "), "{err}");
}

#[test]
fn prepare_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["toy", "--out", "toy", "--train", "1", "--test", "0", "--size", "16"], d);
    for (out, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        ok(&["prepare", "--manifest", "toy/manifest.json", "--out", out, "--sampled", "--seed", seed], d);
    }
    let noisy = |run: &str| std::fs::read(d.join(run).join("raw/c03_000.noisy.rdrw")).unwrap();
    assert_eq!(noisy("a"), noisy("b"));
    assert_ne!(noisy("a"), noisy("c"));
    assert_eq!(read_json(&d.join("a/noise.json")), read_json(&d.join("b/noise.json")));
    let m = Manifest::load(d.join("a/manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 16);
    assert!(m.entries.iter().all(|e| e.is_pair()));
}

#[test]
fn identity_evaluation_reports_noisy_input_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    ok(&["evaluate", "--manifest", "prep/manifest.json", "--out", "report.json"], d);
    let report = read_json(&d.join("report.json"));
    let manifest = Manifest::load(d.join("prep/manifest.json")).unwrap();

    let mut expected = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == rawdiff::dataset::Split::Test) {
        let clean = RawImage::load(d.join("prep").join(&e.clean)).unwrap();
        let noisy = RawImage::load(d.join("prep").join(e.noisy.as_ref().unwrap())).unwrap();
        let (a, b) = (clean.planes().data(), noisy.planes().data());
        let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
        expected.push(10.0 * (1.0 / mse).log10());
    }
    let images = report["images"].as_array().unwrap();
    assert_eq!(images.len(), expected.len());
    for (img, want) in images.iter().zip(&expected) {
        assert!((img["psnr_raw"].as_f64().unwrap() - want).abs() < 1e-9);
        let ssim = img["ssim_rgb"].as_f64().unwrap();
        assert!(ssim > -1.0 && ssim < 1.0);
    }
    let mean = expected.iter().sum::<f64>() / expected.len() as f64;
    assert!((report["mean_psnr_raw"].as_f64().unwrap() - mean).abs() < 1e-9);
    assert_eq!(report["omitted_metrics"], serde_json::json!(["LPIPS", "DISTS"]));
    assert_eq!(report["model"], "identity");
}

#[test]
fn pipeline_smoke_and_denoise_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    prepared(d);
    std::fs::write(d.join("cfg.txt"), format!("{TINY}train.steps = 200\ntrain.checkpoint_every = 100\n")).unwrap();
    ok(&["train", "--config", "cfg.txt", "--manifest", "prep/manifest.json", "--out", "run", "--seed", "3"], d);

    let run = d.join("run");
    for f in ["model.rdck", "metrics.jsonl", "config.txt", "run.json", "checkpoints/step_000100.rdck"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let snapshot = RunConfig::load(run.join("config.txt")).unwrap();
    assert_eq!(snapshot.train.seed, 3);
    assert_eq!(snapshot.train.steps, 200);
    let info = read_json(&run.join("run.json"));
    assert_eq!(info["config_hash"], snapshot.hash());
    assert!(!info["build"].as_str().unwrap().is_empty());
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 200);
    let last: Value = serde_json::from_str(lines.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 200);
    for key in ["loss", "lr", "wall_time"] {
        assert!(last[key].is_f64(), "{key}");
    }

    let denoise = |out: &str, seed: &str| {
        ok(
            &[
                "denoise", "--ckpt", "run/model.rdck", "--input", "prep/raw", "--embedding-file",
                "prep/embeddings.rdem", "--embedding-index", "2", "--steps", "4", "--seed", seed, "--out", out,
            ],
            d,
        )
    };
    denoise("d1", "11");
    denoise("d2", "11");
    denoise("d3", "12");
    let name = "c05_001.noisy.rdrw";
    let read = |o: &str| std::fs::read(d.join(o).join(name)).unwrap();
    assert_eq!(read("d1"), read("d2"));
    assert_ne!(read("d1"), read("d3"));
    let count = std::fs::read_dir(d.join("d1")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "rdrw")
    }).count();
    assert_eq!(count, 64);

    ok(&["render", "--input", &format!("d1/{name}"), "--out", "r.png", "--depth", "16"], d);
    assert!(std::fs::read(d.join("r.png")).unwrap().starts_with(b"\x89PNG"));

    ok(&["evaluate", "--ckpt", "run/model.rdck", "--manifest", "prep/manifest.json", "--out", "model.json", "--steps", "4"], d);
    let report = read_json(&d.join("model.json"));
    assert_eq!(report["images"].as_array().unwrap().len(), 16);
    assert!(report["mean_psnr_raw"].as_f64().unwrap().is_finite());
    assert!(start.elapsed() < Duration::from_secs(600));
}

#[test]
fn deterministic_flag_matches_threaded_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    std::fs::write(d.join("cfg.txt"), format!("{TINY}train.steps = 5\n")).unwrap();
    ok(&["train", "--config", "cfg.txt", "--manifest", "prep/manifest.json", "--out", "run"], d);
    let args = |out: &'static str| {
        vec![
            "denoise", "--ckpt", "run/model.rdck", "--input", "prep/raw", "--embedding-file", "prep/embeddings.rdem",
            "--embedding-index", "0", "--steps", "3", "--out", out,
        ]
    };
    ok(&args("threaded"), d);
    let mut single = args("single");
    single.insert(0, "--deterministic");
    ok(&single, d);
    let a = std::fs::read(d.join("threaded/c09_000.noisy.rdrw")).unwrap();
    let b = std::fs::read(d.join("single/c09_000.noisy.rdrw")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adapters_need_their_base() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["toy", "--pairs", "--out", "pairs", "--train", "1", "--test", "1", "--size", "32"], d);
    std::fs::write(d.join("cfg.txt"), format!("{TINY}train.steps = 3\n")).unwrap();
    for (out, seed) in [("a", "1"), ("b", "2")] {
        ok(&["train", "--config", "cfg.txt", "--manifest", "pairs/manifest.json", "--out", out, "--seed", seed], d);
    }
    ok(&["finetune", "--base", "a/model.rdck", "--manifest", "pairs/manifest.json", "--config", "cfg.txt", "--out", "ft"], d);
    assert!(d.join("ft/adapter.rdck").exists());
    let eval = |base: &str| {
        rawdiff(
            &["evaluate", "--ckpt", base, "--lora", "ft/adapter.rdck", "--manifest", "pairs/manifest.json", "--out", "e.json", "--steps", "2"],
            d,
        )
    };
    assert!(eval("a/model.rdck").status.success());
    let out = eval("b/model.rdck");
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("hash mismatch"));
}
