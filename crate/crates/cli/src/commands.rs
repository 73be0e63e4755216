use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rawdiff::checkpoint::{load_adapters, load_model, params_hash, save_adapters, save_model, CheckpointHeader};
use rawdiff::config::{NoiseChoice, RunConfig};
use rawdiff::dataset::toy::{write_toy_corpus, write_toy_pairs};
use rawdiff::dataset::{Dataset, EmbeddingFile, Manifest, ManifestEntry, PairSource, Split, SyntheticSource};
use rawdiff::denoiser::Denoiser;
use rawdiff::diffusion::{ddpm_sample, DiffusionSchedule};
use rawdiff::evaluation::score;
use rawdiff::metrics::{ssim_rgb, EvalReport, ImageScore};
use rawdiff::noise::{apply_noise, NoiseLevel, NoiseParams};
use rawdiff::raw::{isp_render, write_rgb, RawImage, RgbDepth};
use rawdiff::rng::{keyed_stream, stream};
use rawdiff::tensor::{Dtype, Tensor};
use rawdiff::training::{finetune_lora, MetricsLog, StepStats, Trainer};
use rawdiff::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::run::{create_dir, load_config, write_config, write_run_info};
use crate::{Depth, DenoiseArgs, EvaluateArgs, FinetuneArgs, PrepareArgs, RenderArgs, ToyArgs, TrainArgs};

/// Stream used for batch sampling during training, next to model init.
const DATA_STREAM: u64 = 2;
const PROGRESS_EVERY: u64 = 50;

fn file_safe_id(id: &str) -> Result<&str> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Malformed {
            what: "manifest",
            detail: format!("id {id:?} cannot be used as a file name"),
        });
    }
    Ok(id)
}

#[derive(Serialize)]
struct NoiseRecord {
    source: String,
    seed: u64,
    images: BTreeMap<String, NoiseParams>,
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let choice = if a.sampled {
        NoiseChoice::Sampled
    } else {
        NoiseChoice::Preset(a.noise_level.unwrap_or(NoiseLevel::Low))
    };
    let noise = choice.source(a.preset_interpretation);
    let ds = Dataset::open(&a.manifest, None)?;
    create_dir(&a.out.join("raw"))?;

    let written: Vec<(ManifestEntry, Option<NoiseParams>)> = ds
        .manifest
        .entries
        .par_iter()
        .map(|e| {
            let id = file_safe_id(&e.id)?;
            let (clean, noisy, params) = if e.is_pair() {
                let p = ds.load_real_pair(e)?;
                (p.x0, p.y, None)
            } else {
                let mut rng = keyed_stream(a.seed, id);
                let clean = ds.load_clean(e)?;
                let params = noise.draw(&mut rng);
                let noisy = apply_noise(&clean, &params, &mut rng)?;
                (clean, noisy, Some(params))
            };
            let (c, n) = (format!("raw/{id}.clean.rdrw"), format!("raw/{id}.noisy.rdrw"));
            clean.save(a.out.join(&c), Dtype::F64)?;
            noisy.save(a.out.join(&n), Dtype::F64)?;
            let entry = ManifestEntry {
                clean: c,
                noisy: Some(n),
                pair_gain: None,
                ..e.clone()
            };
            Ok((entry, params))
        })
        .collect::<Result<_>>()?;

    ds.embeddings.save(a.out.join("embeddings.rdem"))?;
    let mut images = BTreeMap::new();
    for (e, p) in &written {
        if let Some(p) = p {
            images.insert(e.id.clone(), *p);
        }
    }
    let record = NoiseRecord {
        source: choice.to_string(),
        seed: a.seed,
        images,
    };
    std::fs::write(a.out.join("noise.json"), serde_json::to_vec_pretty(&record)?)?;
    let manifest = Manifest {
        embeddings: "embeddings.rdem".into(),
        entries: written.into_iter().map(|(e, _)| e).collect(),
    };
    manifest.save(a.out.join("manifest.json"))?;
    write_run_info(
        &a.out,
        "prepare",
        json!({ "seed": a.seed, "noise": choice.to_string(), "source_manifest": a.manifest }),
    )?;
    println!("prepared {} pairs in {}", manifest.entries.len(), a.out.display());
    Ok(())
}

/// Logs every step to `metrics.jsonl` and a progress line now and then.
fn step_logger(out: &Path, lr: f64, total: u64) -> Result<impl FnMut(&StepStats) -> Result<()>> {
    let mut log = MetricsLog::create(out.join("metrics.jsonl"))?;
    Ok(move |s: &StepStats| {
        log.record(s.step, s.loss, lr)?;
        if s.step % PROGRESS_EVERY == 0 || s.step == total {
            eprintln!("step {}/{total} loss {:.5}", s.step, s.loss);
        }
        Ok(())
    })
}

fn manifest_path(cfg: &RunConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| cfg.data.manifest.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::invalid("no manifest: pass --manifest or set data.manifest"))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let manifest = manifest_path(&cfg, a.manifest.as_ref())?;
    cfg.data.manifest = Some(manifest.display().to_string());
    cfg.validate()?;

    let seed = cfg.train.seed;
    let cond_dim = (!cfg.model.uncond).then_some(cfg.model.cond_dim);
    let ds = Dataset::open(&manifest, cond_dim)?;
    let mut source = SyntheticSource::from_dataset(
        &ds,
        Split::Train,
        cfg.data.noise_source(),
        cfg.model.patch_size,
        stream(seed, DATA_STREAM),
    )?;

    create_dir(&a.out.join("checkpoints"))?;
    write_config(&a.out, &cfg)?;
    write_run_info(&a.out, "train", json!({ "config_hash": cfg.hash(), "seed": seed }))?;

    let model = Denoiser::new(cfg.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log = step_logger(&a.out, cfg.train.learning_rate, cfg.train.steps)?;
    let (every, steps, precision) = (cfg.train.checkpoint_every, cfg.train.diffusion_steps, cfg.train.precision);
    let ckpt_dir = a.out.join("checkpoints");
    trainer.fit(&mut source, |s, t| {
        log(s)?;
        if every > 0 && s.step % every == 0 {
            let path = ckpt_dir.join(format!("step_{:06}.rdck", s.step));
            save_model(path, &t.model, steps, s.step, precision)?;
        }
        Ok(())
    })?;
    let done = trainer.steps_done();
    let model = trainer.into_model();
    save_model(a.out.join("model.rdck"), &model, steps, done, precision)?;
    println!("trained {done} steps; wrote {}", a.out.join("model.rdck").display());
    Ok(())
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let (base, header) = load_model(&a.base)?;
    cfg.model = base.config.clone();
    cfg.train.diffusion_steps = header.diffusion_steps;
    cfg.data.manifest = Some(a.manifest.display().to_string());
    cfg.validate()?;

    let seed = cfg.train.seed;
    let ds = Dataset::open(&a.manifest, (!cfg.model.uncond).then_some(cfg.model.cond_dim))?;
    if !ds.manifest.split(Split::Train).any(ManifestEntry::is_pair) {
        return Err(Error::Malformed {
            what: "manifest",
            detail: "no training pairs with a noisy capture".into(),
        });
    }
    let mut source = PairSource::from_dataset(&ds, Split::Train, cfg.model.patch_size, stream(seed, DATA_STREAM))?;

    create_dir(&a.out)?;
    write_config(&a.out, &cfg)?;
    let base_hash = params_hash(&base.params);
    write_run_info(
        &a.out,
        "finetune",
        json!({ "config_hash": cfg.hash(), "seed": seed, "base": a.base, "base_hash": base_hash }),
    )?;
    let mut log = step_logger(&a.out, cfg.train.learning_rate, cfg.train.steps)?;
    let (tuned, _) = finetune_lora(&base, &mut source, &cfg.train, &cfg.lora, |s, _| log(s))?;
    let path = a.out.join("adapter.rdck");
    save_adapters(&path, &tuned, &base_hash, &cfg.lora, header.diffusion_steps, cfg.train.steps)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Model plus optional adapters, and the schedule it was trained with.
fn load_denoiser(ckpt: &Path, lora: Option<&Path>) -> Result<(Denoiser, CheckpointHeader, Option<CheckpointHeader>)> {
    let (mut model, header) = load_model(ckpt)?;
    let adapter = match lora {
        Some(p) => Some(load_adapters(p, &mut model)?),
        None => None,
    };
    Ok((model, header, adapter))
}

fn raw_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| rawdiff::dataset::is_raw_path(p));
    files.sort();
    if files.is_empty() {
        return Err(Error::Malformed {
            what: "input directory",
            detail: format!("no .rdrw files in {}", input.display()),
        });
    }
    Ok(files)
}

fn denoise_cond(a: &DenoiseArgs, model: &Denoiser) -> Result<Option<Tensor>> {
    match (model.config.uncond, a.uncond) {
        (true, true) => Ok(None),
        (true, false) => Err(Error::invalid("checkpoint is the unconditioned variant; pass --uncond")),
        (false, true) => Err(Error::invalid("--uncond needs a checkpoint trained without text conditioning")),
        (false, false) => {
            let (file, index) = a
                .embedding_file
                .as_ref()
                .zip(a.embedding_index)
                .ok_or_else(|| Error::invalid("text-conditioned model needs --embedding-file and --embedding-index"))?;
            Ok(Some(EmbeddingFile::load(file, Some(model.config.cond_dim))?.gather(&[index])?))
        }
    }
}

pub fn denoise(a: &DenoiseArgs) -> Result<()> {
    let (model, header, _) = load_denoiser(&a.ckpt, a.lora.as_deref())?;
    let cond = denoise_cond(a, &model)?;
    let sched = DiffusionSchedule::cosine(header.diffusion_steps)?;
    let inputs = raw_inputs(&a.input)?;
    create_dir(&a.out)?;
    let outputs = inputs
        .par_iter()
        .map(|path| {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("input.rdrw");
            let y = RawImage::load(path)?;
            let mut rng = keyed_stream(a.seed, name);
            let x0 = ddpm_sample(&model, &y, cond.as_ref(), &sched, a.steps, &mut rng)?;
            let out = a.out.join(name);
            x0.save(&out, Dtype::F64)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    write_run_info(
        &a.out,
        "denoise",
        json!({ "seed": a.seed, "steps": a.steps, "ckpt": a.ckpt, "lora": a.lora, "embedding_index": a.embedding_index }),
    )?;
    for o in &outputs {
        println!("{}", o.display());
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let loaded = match &a.ckpt {
        Some(c) => Some(load_denoiser(c, a.lora.as_deref())?),
        None => None,
    };
    let ds = Dataset::open(&a.manifest, None)?;
    let entries: Vec<&ManifestEntry> = ds.manifest.split(Split::Test).collect();
    if entries.is_empty() || entries.iter().any(|e| !e.is_pair()) {
        return Err(Error::Malformed {
            what: "manifest",
            detail: "evaluation needs test entries with noisy captures (see `rawdiff prepare`)".into(),
        });
    }

    let mut cfg = RunConfig::default();
    cfg.train.seed = a.seed;
    cfg.data.sampling_steps = a.steps;
    cfg.data.manifest = Some(a.manifest.display().to_string());
    let sched = match &loaded {
        Some((model, header, adapter)) => {
            cfg.model = model.config.clone();
            cfg.train.diffusion_steps = header.diffusion_steps;
            if let Some(lora) = adapter.as_ref().and_then(|h| h.lora.clone()) {
                cfg.lora = lora;
            }
            Some(DiffusionSchedule::cosine(header.diffusion_steps)?)
        }
        None => None,
    };

    let scored = entries
        .par_iter()
        .map(|e| {
            let pair = ds.load_real_pair(e)?;
            let estimate = match (&loaded, &sched) {
                (Some((model, _, _)), Some(sched)) => {
                    let cond = (!model.config.uncond).then_some(&pair.cond);
                    let mut rng = keyed_stream(a.seed, &e.id);
                    ddpm_sample(model, &pair.y, cond, sched, a.steps, &mut rng)?
                }
                _ => pair.y.clone(),
            };
            let s = score(estimate.planes().data(), pair.x0.planes().data())?;
            let isp = e.isp.clone().unwrap_or_else(|| pair.x0.isp().clone());
            let ssim = ssim_rgb(&isp_render(&estimate, &isp)?, &isp_render(&pair.x0, &isp)?)?;
            Ok((
                ImageScore {
                    id: e.id.clone(),
                    psnr_raw: s.psnr,
                    ssim_rgb: ssim,
                },
                s.l1,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mean_l1 = scored.iter().map(|(_, l1)| l1).sum::<f64>() / scored.len() as f64;
    let report = EvalReport::new(scored.into_iter().map(|(s, _)| s).collect(), mean_l1, cfg.hash());
    let mut value = serde_json::to_value(&report)?;
    if let Some(map) = value.as_object_mut() {
        map.insert("build".into(), json!(crate::BUILD_ID));
        map.insert("model".into(), json!(a.ckpt.as_ref().map_or("identity".to_string(), |p| p.display().to_string())));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(&a.out, serde_json::to_vec_pretty(&value)?)?;
    println!(
        "{} images: psnr_raw {:.3} dB, ssim_rgb {:.4}, l1 {:.5}",
        report.images.len(),
        report.mean_psnr_raw,
        report.mean_ssim_rgb,
        report.mean_l1_raw
    );
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let raw = RawImage::load(&a.input)?;
    let rgb = isp_render(&raw, raw.isp())?;
    let depth = match a.depth {
        Depth::Eight => RgbDepth::Eight,
        Depth::Sixteen => RgbDepth::Sixteen,
    };
    write_rgb(&a.out, &rgb, depth)
}

pub fn toy(a: &ToyArgs) -> Result<()> {
    let manifest = if a.pairs {
        let noise = NoiseParams::new(a.shot, a.read)?;
        write_toy_pairs(&a.out, a.train, a.test, a.size, noise, a.seed)?
    } else {
        write_toy_corpus(&a.out, a.train, a.test, a.size, a.seed)?
    };
    println!("wrote {} entries to {}", manifest.entries.len(), a.out.join("manifest.json").display());
    Ok(())
}
