use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"RDEM";
const VERSION: u32 = 1;

/// `count` vectors of `dim` f32 values, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::Malformed {
                what: "embedding file",
                detail: format!("{} values do not form vectors of length {dim}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed {
                what: "embedding file",
                detail: "non-finite value".into(),
            });
        }
        Ok(EmbeddingFile { dim, values })
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("embedding vectors differ in length"));
        }
        Self::new(dim, vectors.iter().flatten().map(|&v| v as f32).collect())
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw(&self, index: usize) -> Result<&[f32]> {
        if index >= self.count() {
            return Err(Error::invalid(format!(
                "embedding index {index} out of range for {} vectors",
                self.count()
            )));
        }
        Ok(&self.values[index * self.dim..(index + 1) * self.dim])
    }

    pub fn vector(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.raw(index)?.iter().map(|&v| v as f64).collect())
    }

    /// `[indices.len(), dim]` tensor of the selected vectors.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.raw(i)?.iter().map(|&v| v as f64));
        }
        Tensor::new([indices.len(), self.dim], data)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.count() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses an `RDEM` stream. With `expected_dim`, a different stored
    /// dimension is a [`Error::DimensionMismatch`].
    pub fn read_from<R: Read>(r: &mut R, expected_dim: Option<usize>) -> Result<Self> {
        let mut head = [0u8; 16];
        fill(r, &mut head)?;
        let magic: [u8; 4] = head[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: "embedding file",
                expected: MAGIC,
                found: magic,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "embedding file",
                version: u32_at(4),
            });
        }
        let (count, dim) = (u32_at(8) as usize, u32_at(12) as usize);
        if let Some(d) = expected_dim {
            if d != dim {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: dim,
                });
            }
        }
        if count == 0 || dim == 0 {
            return Err(Error::Malformed {
                what: "embedding file",
                detail: format!("count {count} and dim {dim} must be positive"),
            });
        }
        let mut buf = vec![0u8; count * dim * 4];
        fill(r, &mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, values)
    }

    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), expected_dim)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated { what: "embedding file" },
        _ => Error::Io(e),
    })
}
