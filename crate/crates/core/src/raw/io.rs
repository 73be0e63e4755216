use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use super::{IspParams, RawImage, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

const RAW_MAGIC: [u8; 4] = *b"RDRW";
const RAW_VERSION: u32 = 1;

/// Writes the `RDRW` container: header, four planes little-endian row-major,
/// then the length-prefixed JSON ISP parameters.
pub fn write_raw<W: Write>(w: &mut W, raw: &RawImage, dtype: Dtype) -> Result<()> {
    w.write_all(&RAW_MAGIC)?;
    w.write_all(&RAW_VERSION.to_le_bytes())?;
    w.write_all(&(raw.height() as u32).to_le_bytes())?;
    w.write_all(&(raw.width() as u32).to_le_bytes())?;
    w.write_all(&[dtype.tag()])?;
    for v in raw.planes().data() {
        match dtype {
            Dtype::F64 => w.write_all(&v.to_le_bytes())?,
            Dtype::F32 => w.write_all(&(*v as f32).to_le_bytes())?,
        }
    }
    let meta = serde_json::to_vec(raw.isp())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    Ok(())
}

pub fn read_raw<R: Read>(r: &mut R) -> Result<RawImage> {
    let mut head = [0u8; 17];
    fill(r, &mut head)?;
    let magic: [u8; 4] = head[..4].try_into().unwrap();
    if magic != RAW_MAGIC {
        return Err(Error::BadMagic {
            what: "raw image",
            expected: RAW_MAGIC,
            found: magic,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != RAW_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "raw image",
            version,
        });
    }
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Malformed {
            what: "raw image",
            detail: format!("extents {h}x{w} are not even and positive"),
        });
    }
    let dtype = Dtype::from_tag(head[16])?;
    let n = h * w;
    let data: Vec<f64> = match dtype {
        Dtype::F64 => {
            let mut buf = vec![0u8; n * 8];
            fill(r, &mut buf)?;
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        Dtype::F32 => {
            let mut buf = vec![0u8; n * 4];
            fill(r, &mut buf)?;
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
    };
    let mut len = [0u8; 4];
    fill(r, &mut len)?;
    let mut meta = vec![0u8; u32::from_le_bytes(len) as usize];
    fill(r, &mut meta)?;
    let isp: IspParams = serde_json::from_slice(&meta)?;
    RawImage::new(Tensor::new([4, h / 2, w / 2], data)?, isp)
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated { what: "raw image" },
        _ => Error::Io(e),
    })
}

impl RawImage {
    pub fn load(path: impl AsRef<Path>) -> Result<RawImage> {
        read_raw(&mut BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_raw(&mut w, self, dtype)?;
        w.flush()?;
        Ok(())
    }
}

/// Sample depth for RGB output files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgbDepth {
    Eight,
    Sixteen,
}

/// Reads a PNG or PPM (8 or 16 bit) into `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = image::open(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data = match &img {
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        _ => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    };
    RgbImage::new(height, width, data)
}

/// Writes PNG or PPM depending on the extension, quantising to `depth`.
pub fn write_rgb(path: impl AsRef<Path>, rgb: &RgbImage, depth: RgbDepth) -> Result<()> {
    let (w, h) = (rgb.width as u32, rgb.height as u32);
    let img = match depth {
        RgbDepth::Eight => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(
                w,
                h,
                rgb.data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect(),
            )
            .expect("buffer sized from image"),
        ),
        RgbDepth::Sixteen => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(
                w,
                h,
                rgb.data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                    .collect(),
            )
            .expect("buffer sized from image"),
        ),
    };
    img.save(path)?;
    Ok(())
}
