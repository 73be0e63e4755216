use serde::{Deserialize, Serialize};

use super::{BayerMosaic, RawImage, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-to-display transfer curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Gamma {
    /// sRGB: linear segment below 0.0031308, then `1.055 x^(1/2.4) - 0.055`.
    #[default]
    Srgb,
    /// `x^(1/exponent)`.
    Power { exponent: f64 },
}

impl Gamma {
    pub fn encode(self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        if x >= 1.0 {
            return 1.0;
        }
        match self {
            Gamma::Srgb => {
                if x <= 0.0031308 {
                    12.92 * x
                } else {
                    1.055 * x.powf(1.0 / 2.4) - 0.055
                }
            }
            Gamma::Power { exponent } => x.powf(1.0 / exponent),
        }
    }

    pub fn decode(self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        if y >= 1.0 {
            return 1.0;
        }
        match self {
            Gamma::Srgb => {
                if y <= 0.04045 {
                    y / 12.92
                } else {
                    ((y + 0.055) / 1.055).powf(2.4)
                }
            }
            Gamma::Power { exponent } => y.powf(exponent),
        }
    }
}

/// Render-chain parameters. Green gains are fixed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    pub exposure_gain: f64,
    /// `(red gain, blue gain)`.
    pub white_balance: [f64; 2],
    /// Row-major camera-to-output colour matrix; rows sum to 1.
    pub ccm: [[f64; 3]; 3],
    #[serde(default)]
    pub gamma: Gamma,
}

impl Default for IspParams {
    fn default() -> Self {
        IspParams {
            exposure_gain: 1.0,
            white_balance: [1.0, 1.0],
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: Gamma::Srgb,
        }
    }
}

impl IspParams {
    pub fn validate(&self) -> Result<()> {
        let gains = [
            self.exposure_gain,
            self.white_balance[0],
            self.white_balance[1],
        ];
        if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::invalid(format!("ISP gains must be positive, got {gains:?}")));
        }
        for row in &self.ccm {
            let s: f64 = row.iter().sum();
            if !row.iter().all(|v| v.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("CCM rows must sum to 1, got {row:?}")));
            }
        }
        if let Gamma::Power { exponent } = self.gamma {
            if !(exponent.is_finite() && exponent > 0.0) {
                return Err(Error::invalid(format!("gamma exponent must be positive, got {exponent}")));
            }
        }
        Ok(())
    }

    fn ccm_inverse(&self) -> Result<[[f64; 3]; 3]> {
        let m = &self.ccm;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
        if det.abs() < 1e-12 {
            return Err(Error::Singular(format!("CCM determinant {det:e}")));
        }
        let inv = 1.0 / det;
        Ok([
            [cof(1, 2, 1, 2) * inv, -cof(0, 2, 1, 2) * inv, cof(0, 1, 1, 2) * inv],
            [-cof(1, 2, 0, 2) * inv, cof(0, 2, 0, 2) * inv, -cof(0, 1, 0, 2) * inv],
            [cof(1, 2, 0, 1) * inv, -cof(0, 2, 0, 1) * inv, cof(0, 1, 0, 1) * inv],
        ])
    }

    /// Per-plane gain in `(R, Gr, Gb, B)` order.
    fn plane_gains(&self) -> [f64; 4] {
        let e = self.exposure_gain;
        [e * self.white_balance[0], e, e, e * self.white_balance[1]]
    }
}

fn apply3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

const KERNEL_RB: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];
const KERNEL_G: [[f64; 3]; 3] = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];

/// Colour (0 = R, 1 = G, 2 = B) sampled at mosaic position `(y, x)`.
fn cfa_colour(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// 3x3 zero-padded convolution of a single plane.
fn conv3(src: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in k.iter().enumerate() {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for (kx, &kv) in row.iter().enumerate() {
                    let sx = x as isize + kx as isize - 1;
                    if kv != 0.0 && sx >= 0 && sx < w as isize {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear demosaic through fixed 3x3 kernels. Each colour is convolved
/// with zero padding together with its sampling mask and renormalised by the
/// convolved mask, which is exactly 1 in the interior and compensates the
/// missing taps along the border.
pub(crate) fn demosaic_bilinear(m: &BayerMosaic) -> RgbImage {
    let (h, w) = (m.height, m.width);
    let mut rgb = vec![0.0; h * w * 3];
    for c in 0..3 {
        let mut masked = vec![0.0; h * w];
        let mut mask = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if cfa_colour(y, x) == c {
                    masked[y * w + x] = m.at(y, x);
                    mask[y * w + x] = 1.0;
                }
            }
        }
        let kernel = if c == 1 { &KERNEL_G } else { &KERNEL_RB };
        let num = conv3(&masked, h, w, kernel);
        let den = conv3(&mask, h, w, kernel);
        for i in 0..h * w {
            rgb[i * 3 + c] = num[i] / den[i];
        }
    }
    RgbImage {
        height: h,
        width: w,
        data: rgb,
    }
}

/// Raw to display RGB: exposure gain, white balance, clip, bilinear
/// demosaic, colour correction, gamma.
pub fn isp_render(raw: &RawImage, p: &IspParams) -> Result<RgbImage> {
    p.validate()?;
    if !raw.planes().all_finite() {
        return Err(Error::NonFinite {
            node: "isp_render input".into(),
        });
    }
    let gains = p.plane_gains();
    let (ph, pw) = raw.plane_dims();
    let mut planes = raw.planes().data().to_vec();
    for (i, v) in planes.iter_mut().enumerate() {
        *v = (*v * gains[i / (ph * pw)]).clamp(0.0, 1.0);
    }
    let gained = RawImage::new(Tensor::new([4, ph, pw], planes)?, p.clone())?;
    let mut rgb = demosaic_bilinear(&BayerMosaic::unpack(&gained));
    for px in rgb.data.chunks_exact_mut(3) {
        let c = apply3(&p.ccm, [px[0], px[1], px[2]]);
        for k in 0..3 {
            px[k] = p.gamma.encode(c[k].clamp(0.0, 1.0));
        }
    }
    Ok(rgb)
}

/// Analytic inverse of [`isp_render`]: inverse gamma, inverse CCM, inverse
/// gains, then Bayer subsampling. Output is clipped to `[0, 1]`.
pub fn invert_isp(rgb: &RgbImage, p: &IspParams) -> Result<RawImage> {
    p.validate()?;
    if rgb.height % 2 != 0 || rgb.width % 2 != 0 {
        return Err(Error::invalid(format!(
            "RGB extents must be even, got {}x{}",
            rgb.height, rgb.width
        )));
    }
    let inv = p.ccm_inverse()?;
    let gains = p.plane_gains();
    let (h, w) = (rgb.height, rgb.width);
    let mut mosaic = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = rgb.pixel(y, x).map(|v| p.gamma.decode(v));
            let lin = apply3(&inv, px);
            let c = cfa_colour(y, x);
            let plane = 2 * (y % 2) + (x % 2);
            mosaic[y * w + x] = (lin[c] / gains[plane]).clamp(0.0, 1.0);
        }
    }
    BayerMosaic::new(h, w, mosaic)?.pack(p.clone())
}
