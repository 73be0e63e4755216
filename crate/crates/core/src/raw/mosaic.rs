use super::{IspParams, RawImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-plane sensor mosaic in RGGB order:
///
/// ```text
/// R  Gr
/// Gb B
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BayerMosaic {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl BayerMosaic {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "mosaic buffer of {} values does not fit {height}x{width}",
                data.len()
            )));
        }
        Ok(BayerMosaic {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Splits the mosaic into `(R, Gr, Gb, B)` planes.
    pub fn pack(&self, isp: IspParams) -> Result<RawImage> {
        let (h, w) = (self.height, self.width);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "Bayer mosaic extents must be even and positive, got {h}x{w}"
            )));
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut planes = vec![0.0; 4 * ph * pw];
        for y in 0..h {
            for x in 0..w {
                let p = 2 * (y % 2) + (x % 2);
                planes[(p * ph + y / 2) * pw + x / 2] = self.data[y * w + x];
            }
        }
        RawImage::new(Tensor::new([4, ph, pw], planes)?, isp)
    }

    pub fn unpack(raw: &RawImage) -> BayerMosaic {
        let (ph, pw) = raw.plane_dims();
        let (h, w) = (2 * ph, 2 * pw);
        let src = raw.planes().data();
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = 2 * (y % 2) + (x % 2);
                data[y * w + x] = src[(p * ph + y / 2) * pw + x / 2];
            }
        }
        BayerMosaic {
            height: h,
            width: w,
            data,
        }
    }
}
