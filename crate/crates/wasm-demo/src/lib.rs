//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes, the layout of canvas
//! `ImageData`. Alpha is ignored on input and set opaque on output.

use rawdiff::diffusion::DiffusionSchedule;
use rawdiff::noise::{apply_noise, preset_level, NoiseLevel, NoiseParams, PresetInterpretation};
use rawdiff::raw::{invert_isp, isp_render, IspParams, RawImage, RgbImage};
use rawdiff::rng::seeded;
use rawdiff::{Error, Result};
use wasm_bindgen::prelude::*;

fn to_rgb(rgba: &[u8], width: usize, height: usize) -> Result<RgbImage> {
    if rgba.len() != width * height * 4 {
        return Err(Error::invalid(format!(
            "{} bytes for a {width}x{height} RGBA image",
            rgba.len()
        )));
    }
    // The mosaic needs even extents; drop a trailing row/column.
    let (h, w) = (height & !1, width & !1);
    if h == 0 || w == 0 {
        return Err(Error::invalid("image must be at least 2x2"));
    }
    Ok(RgbImage::from_fn(h, w, |y, x| {
        let o = (y * width + x) * 4;
        [0, 1, 2].map(|c| rgba[o + c] as f64 / 255.0)
    }))
}

fn to_rgba(rgb: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.height * rgb.width * 4);
    for y in 0..rgb.height {
        for x in 0..rgb.width {
            let p = rgb.pixel(y, x);
            out.extend(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
    }
    out
}

fn unprocess(rgba: &[u8], width: usize, height: usize) -> Result<RawImage> {
    invert_isp(&to_rgb(rgba, width, height)?, &IspParams::default())
}

/// Noise parameters for a named preset ("0.1" or "0.3") as `[shot, read]`.
pub fn preset(level: &str) -> Result<[f64; 2]> {
    let p = preset_level(level.parse::<NoiseLevel>()?, PresetInterpretation::Linear);
    Ok([p.lambda_shot, p.lambda_read])
}

/// Unprocesses the image to raw, adds sensor noise and renders it back.
pub fn noisy_preview(rgba: &[u8], width: usize, height: usize, shot: f64, read: f64, seed: u64) -> Result<Vec<u8>> {
    let raw = unprocess(rgba, width, height)?;
    let noisy = apply_noise(&raw, &NoiseParams::new(shot, read)?, &mut seeded(seed))?;
    Ok(to_rgba(&isp_render(&noisy, &IspParams::default())?))
}

/// Renders the unprocessed image with a different exposure and white balance.
pub fn rerender(rgba: &[u8], width: usize, height: usize, exposure: f64, red_gain: f64, blue_gain: f64) -> Result<Vec<u8>> {
    let raw = unprocess(rgba, width, height)?;
    let params = IspParams {
        exposure_gain: exposure,
        white_balance: [red_gain, blue_gain],
        ..IspParams::default()
    };
    params.validate()?;
    Ok(to_rgba(&isp_render(&raw, &params)?))
}

/// `alpha_bar(t)` for `t = 0..=steps` of the cosine schedule.
pub fn alpha_bars(steps: usize) -> Result<Vec<f64>> {
    let s = DiffusionSchedule::cosine(steps)?;
    Ok((0..=steps).map(|t| s.alpha_bar(t)).collect())
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = presetParams)]
pub fn preset_js(level: &str) -> std::result::Result<Vec<f64>, JsError> {
    js(preset(level)).map(Vec::from)
}

#[wasm_bindgen(js_name = noisyPreview)]
pub fn noisy_preview_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    shot: f64,
    read: f64,
    seed: u32,
) -> std::result::Result<Vec<u8>, JsError> {
    js(noisy_preview(rgba, width, height, shot, read, seed.into()))
}

#[wasm_bindgen(js_name = rerender)]
pub fn rerender_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    exposure: f64,
    red_gain: f64,
    blue_gain: f64,
) -> std::result::Result<Vec<u8>, JsError> {
    js(rerender(rgba, width, height, exposure, red_gain, blue_gain))
}

#[wasm_bindgen(js_name = alphaBars)]
pub fn alpha_bars_js(steps: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(alpha_bars(steps))
}

/// A toy-corpus image as RGBA, for a starting picture.
#[wasm_bindgen(js_name = toyImage)]
pub fn toy_image(class: usize, variant: u32, size: usize) -> Vec<u8> {
    to_rgba(&rawdiff::dataset::toy::toy_image(class % rawdiff::dataset::toy::CLASSES, variant.into(), size))
}
