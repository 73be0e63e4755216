//! Raw Bayer images, RGGB packing, and the deterministic render chain.

mod io;
mod isp;
mod mosaic;

pub use io::{read_raw, read_rgb, write_raw, write_rgb, RgbDepth};
pub use isp::{invert_isp, isp_render, Gamma, IspParams};
pub use mosaic::BayerMosaic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of each colour plane in a packed RGGB tensor.
pub const PLANE_R: usize = 0;
pub const PLANE_GR: usize = 1;
pub const PLANE_GB: usize = 2;
pub const PLANE_B: usize = 3;

/// A raw capture packed as four quarter-resolution planes `(R, Gr, Gb, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    planes: Tensor,
    isp: IspParams,
}

impl RawImage {
    /// `planes` must have shape `[4, H/2, W/2]`.
    pub fn new(planes: Tensor, isp: IspParams) -> Result<Self> {
        if planes.shape().len() != 3 || planes.shape()[0] != 4 {
            return Err(Error::invalid(format!(
                "raw planes must have shape [4, h, w], got {:?}",
                planes.shape()
            )));
        }
        isp.validate()?;
        Ok(RawImage { planes, isp })
    }

    pub fn from_planes(planes: Tensor) -> Result<Self> {
        Self::new(planes, IspParams::default())
    }

    /// Mosaic height (twice the plane height).
    pub fn height(&self) -> usize {
        2 * self.planes.shape()[1]
    }

    pub fn width(&self) -> usize {
        2 * self.planes.shape()[2]
    }

    pub fn plane_dims(&self) -> (usize, usize) {
        (self.planes.shape()[1], self.planes.shape()[2])
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn into_planes(self) -> Tensor {
        self.planes
    }

    pub fn plane(&self, index: usize) -> &[f64] {
        let n = self.planes.len() / 4;
        &self.planes.data()[index * n..(index + 1) * n]
    }

    pub fn isp(&self) -> &IspParams {
        &self.isp
    }

    pub fn with_isp(mut self, isp: IspParams) -> Result<Self> {
        isp.validate()?;
        self.isp = isp;
        Ok(self)
    }

    pub fn with_planes(&self, planes: Tensor) -> Result<Self> {
        if planes.shape() != self.planes.shape() {
            return Err(Error::invalid(format!(
                "plane shape {:?} differs from {:?}",
                planes.shape(),
                self.planes.shape()
            )));
        }
        Ok(RawImage {
            planes,
            isp: self.isp.clone(),
        })
    }

    pub fn same_extents(&self, other: &RawImage) -> bool {
        self.planes.shape() == other.planes.shape()
    }

    pub fn is_clean_range(&self) -> bool {
        self.planes.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Crop of the mosaic at `(top, left)` with size `h x w`; every argument
    /// must be even so the RGGB phase is preserved.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<RawImage> {
        if [top, left, h, w].iter().any(|v| v % 2 != 0) {
            return Err(Error::invalid(format!(
                "crop ({top}, {left}, {h}, {w}) is not aligned to the Bayer grid"
            )));
        }
        if h == 0 || w == 0 || top + h > self.height() || left + w > self.width() {
            return Err(Error::invalid(format!(
                "crop ({top}, {left}, {h}, {w}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let (ph, pw) = self.plane_dims();
        let (t, l, ch, cw) = (top / 2, left / 2, h / 2, w / 2);
        let mut data = Vec::with_capacity(4 * ch * cw);
        for p in 0..4 {
            for y in t..t + ch {
                let row = (p * ph + y) * pw;
                data.extend_from_slice(&self.planes.data()[row + l..row + l + cw]);
            }
        }
        Ok(RawImage {
            planes: Tensor::new([4, ch, cw], data)?,
            isp: self.isp.clone(),
        })
    }
}

/// Interleaved `H x W x 3` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "rgb buffer of {} values does not fit {height}x{width}x3",
                data.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One colour channel as a contiguous `H x W` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}
