//! PSNR on raw planes and SSIM on rendered RGB.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{RawImage, RgbImage};

/// Finite stand-in for an infinite PSNR in reports.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR over all four planes. Identical inputs give `f64::INFINITY`; use
/// [`report_psnr`] before serialising.
pub fn psnr_raw(a: &RawImage, b: &RawImage, peak: f64) -> Result<f64> {
    if !a.same_extents(b) {
        return Err(Error::DimensionMismatch {
            expected: a.planes().len(),
            found: b.planes().len(),
        });
    }
    psnr_slices(a.planes().data(), b.planes().data(), peak)
}

pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    // running mean: exact when every squared error is equal
    let mut mse = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let d = (x - y) * (x - y);
        mse += (d - mse) / (k + 1) as f64;
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

pub fn report_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one channel pair with a Gaussian window of `size`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let size = SSIM_WINDOW.min(h).min(w);
    let size = if size % 2 == 0 { size - 1 } else { size };
    let k = gaussian_window(size, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over the three channels. Images smaller than the 11x11 window
/// use the largest odd window that fits.
pub fn ssim_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::invalid(format!(
            "ssim extents differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height == 0 || a.width == 0 {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let total: f64 = (0..3)
        .map(|c| ssim_plane(&a.channel(c), &b.channel(c), a.height, a.width))
        .sum();
    Ok(total / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr_raw: f64,
    pub ssim_rgb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr_raw: f64,
    pub mean_ssim_rgb: f64,
    pub mean_l1_raw: f64,
    pub config_hash: String,
    /// Metrics from the original protocol that are not computed here.
    pub omitted_metrics: Vec<String>,
}

impl EvalReport {
    /// PSNR values in `images` must already be capped.
    pub fn new(images: Vec<ImageScore>, mean_l1_raw: f64, config_hash: String) -> Self {
        let n = images.len().max(1) as f64;
        EvalReport {
            mean_psnr_raw: images.iter().map(|s| s.psnr_raw).sum::<f64>() / n,
            mean_ssim_rgb: images.iter().map(|s| s.ssim_rgb).sum::<f64>() / n,
            images,
            mean_l1_raw,
            config_hash,
            omitted_metrics: vec!["LPIPS".into(), "DISTS".into()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn raw_const(v: f64) -> RawImage {
        RawImage::from_planes(Tensor::full([4, 3, 5], v)).unwrap()
    }

    #[test]
    fn identical_raw_reports_cap() {
        let a = raw_const(0.4);
        let p = psnr_raw(&a, &a, 1.0).unwrap();
        assert!(p.is_infinite());
        assert_eq!(report_psnr(p), 99.0);
    }

    #[test]
    fn uniform_error_of_a_tenth_is_twenty_db() {
        assert_eq!(psnr_raw(&raw_const(0.0), &raw_const(0.1), 1.0).unwrap(), 20.0);
    }

    #[test]
    fn mismatched_extents_error() {
        let b = RawImage::from_planes(Tensor::zeros([4, 2, 2])).unwrap();
        assert!(psnr_raw(&raw_const(0.0), &b, 1.0).is_err());
    }

    #[test]
    fn constant_image_and_its_negative_at_half() {
        let a = RgbImage::from_fn(16, 16, |_, _| [0.5; 3]);
        let neg = RgbImage::new(16, 16, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert_eq!(ssim_rgb(&a, &neg).unwrap(), 1.0);
    }

    #[test]
    fn window_is_normalised() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }
}
