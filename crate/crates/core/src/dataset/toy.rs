//! Procedural stand-in for a captioned photo corpus: 16 classes, each a
//! pattern family crossed with a two-colour palette, with one fixed random
//! unit vector per class as its "caption embedding".

use std::path::Path;

use rand::Rng as _;

use super::{EmbeddingFile, Manifest, ManifestEntry, Split, CLEAN_CAPTURE, NOISY_CAPTURE};
use crate::denoiser::COND_DIM;
use crate::error::Result;
use crate::noise::{apply_noise, NoiseParams};
use crate::raw::{invert_isp, write_rgb, IspParams, RgbDepth, RgbImage};
use crate::rng::{keyed_stream, stream};
use crate::tensor::Dtype;

pub const CLASSES: usize = 16;
pub const PATTERNS: [&str; 4] = ["gradient", "checker", "disc", "stripes"];
pub const PALETTES: [[[f64; 3]; 2]; 4] = [
    [[0.85, 0.25, 0.2], [0.15, 0.2, 0.6]],
    [[0.2, 0.7, 0.3], [0.8, 0.75, 0.2]],
    [[0.9, 0.9, 0.85], [0.1, 0.1, 0.12]],
    [[0.55, 0.2, 0.65], [0.25, 0.65, 0.7]],
];

pub fn class_name(class: usize) -> String {
    format!("{} {}", PATTERNS[class / 4], class % 4)
}

/// One image of `class`; `variant` selects the geometry within the class.
pub fn toy_image(class: usize, variant: u64, size: usize) -> RgbImage {
    let mut rng = stream(variant, class as u64);
    let [a, b] = PALETTES[class % 4];
    let mix = |t: f64| -> [f64; 3] {
        let t = t.clamp(0.0, 1.0);
        [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
    };
    let s = size as f64;
    match class / 4 {
        0 => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            RgbImage::from_fn(size, size, |y, x| {
                let u = ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) * 1.4 + 0.5;
                mix(u)
            })
        }
        1 => {
            let cell = rng.gen_range(3..=8usize);
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            RgbImage::from_fn(size, size, |y, x| mix((((x + ox) / cell + (y + oy) / cell) % 2) as f64))
        }
        2 => {
            let (cx, cy) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
            let r = rng.gen_range(0.15..0.35) * s;
            RgbImage::from_fn(size, size, |y, x| {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                mix(((d - r) / 1.5 + 0.5).clamp(0.0, 1.0))
            })
        }
        _ => {
            let period = rng.gen_range(4.0..10.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertical = rng.gen_bool(0.5);
            RgbImage::from_fn(size, size, |y, x| {
                let p = if vertical { x } else { y } as f64;
                mix(0.5 + 0.5 * (std::f64::consts::TAU * p / period + phase).sin())
            })
        }
    }
}

/// Unit-length Gaussian vectors, one per class, fixed for a given seed.
pub fn toy_embeddings(seed: u64) -> EmbeddingFile {
    let vectors: Vec<Vec<f64>> = (0..CLASSES)
        .map(|k| {
            let mut rng = keyed_stream(seed, &format!("toy.class.{k}"));
            let v: Vec<f64> = (0..COND_DIM).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    EmbeddingFile::from_vectors(&vectors).expect("fixed shape")
}

/// Writes `per_class_train + per_class_test` PNGs per class, the class
/// embeddings and a manifest into `dir`.
pub fn write_toy_corpus(dir: &Path, per_class_train: usize, per_class_test: usize, size: usize, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    toy_embeddings(seed).save(dir.join("embeddings.rdem"))?;
    let mut entries = Vec::new();
    let mut captions = String::new();
    for class in 0..CLASSES {
        captions.push_str(&class_name(class));
        captions.push('\n');
        for i in 0..per_class_train + per_class_test {
            let id = format!("c{class:02}_{i:03}");
            let rel = format!("images/{id}.png");
            let variant = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            write_rgb(dir.join(&rel), &toy_image(class, variant, size), RgbDepth::Sixteen)?;
            entries.push(ManifestEntry {
                split: if i < per_class_train { Split::Train } else { Split::Test },
                ..ManifestEntry::synthetic(id, rel, class)
            });
        }
    }
    std::fs::write(dir.join("captions.txt"), captions)?;
    let manifest = Manifest {
        embeddings: "embeddings.rdem".into(),
        entries,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Writes clean/noisy raw pairs standing in for captured data: the noisy
/// half is drawn from `noise` with a per-id stream and tagged with the
/// high-gain capture settings.
pub fn write_toy_pairs(
    dir: &Path,
    per_class_train: usize,
    per_class_test: usize,
    size: usize,
    noise: NoiseParams,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("raw"))?;
    toy_embeddings(seed).save(dir.join("embeddings.rdem"))?;
    let mut entries = Vec::new();
    for class in 0..CLASSES {
        for i in 0..per_class_train + per_class_test {
            let id = format!("p{class:02}_{i:03}");
            let variant = seed.wrapping_mul(1_000_033).wrapping_add(10_000 + i as u64);
            let clean = invert_isp(&toy_image(class, variant, size), &IspParams::default())?;
            let noisy = apply_noise(&clean, &noise, &mut keyed_stream(seed, &id))?;
            let (c, n) = (format!("raw/{id}.clean.rdrw"), format!("raw/{id}.noisy.rdrw"));
            clean.save(dir.join(&c), Dtype::F64)?;
            noisy.save(dir.join(&n), Dtype::F64)?;
            entries.push(ManifestEntry {
                noisy: Some(n),
                split: if i < per_class_train { Split::Train } else { Split::Test },
                clean_meta: Some(CLEAN_CAPTURE),
                noisy_meta: Some(NOISY_CAPTURE),
                pair_gain: Some(1.0),
                ..ManifestEntry::synthetic(id, c, class)
            });
        }
    }
    let manifest = Manifest {
        embeddings: "embeddings.rdem".into(),
        entries,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
