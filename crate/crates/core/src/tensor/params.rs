use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"RDWT";
const VERSION: u32 = 1;

/// On-disk element type of a serialized parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            _ => Err(Error::Malformed {
                what: "dtype tag",
                detail: format!("unknown tag {tag}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in a deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sub-store holding only the entries whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every entry of `other`, replacing entries with the same name.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Writes the `RDWT` container. Trainability is not persisted.
    pub fn write_to<W: Write>(&self, w: &mut W, dtype: Dtype) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[dtype.tag()])?;
            let shape = p.value.shape();
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::invalid(format!("rank too large for {name}")))?;
            w.write_all(&[rank])?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match dtype {
                Dtype::F64 => {
                    for v in p.value.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Dtype::F32 => {
                    for v in p.value.data() {
                        w.write_all(&(*v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dtype)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads an `RDWT` container; every loaded parameter is marked trainable.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: "parameter container",
                expected: MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "parameter container",
                version,
            });
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Malformed {
                what: "parameter name",
                detail: e.to_string(),
            })?;
            let mut tag_rank = [0u8; 2];
            read_exact(r, &mut tag_rank)?;
            let dtype = Dtype::from_tag(tag_rank[0])?;
            let shape = (0..tag_rank[1])
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                Dtype::F64 => {
                    let mut raw = vec![0u8; n * 8];
                    read_exact(r, &mut raw)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect()
                }
                Dtype::F32 => {
                    let mut raw = vec![0u8; n * 4];
                    read_exact(r, &mut raw)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect()
                }
            };
            let value = Tensor::new(shape, data).map_err(|e| Error::Malformed {
                what: "parameter container",
                detail: format!("{name}: {e}"),
            })?;
            store.insert(name, value, true);
        }
        Ok(store)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            what: "parameter container",
        },
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
