//! Model and adapter checkpoint files: a length-prefixed JSON header
//! followed by an `RDWT` parameter container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::lora::{adapter_params, base_params, LoraConfig, PREFIX};
use crate::tensor::{Dtype, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub step: u64,
    /// Hash of the base parameters an adapter was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
}

/// SHA-256 over the base (non-adapter) parameters in their f64 container
/// encoding, hex encoded.
pub fn params_hash(params: &ParamStore) -> String {
    let bytes = base_params(params).to_bytes(Dtype::F64);
    hex::encode(Sha256::digest(bytes))
}

pub fn write_checkpoint<W: Write>(w: &mut W, header: &CheckpointHeader, params: &ParamStore, dtype: Dtype) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    params.write_to(w, dtype)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(CheckpointHeader, ParamStore)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| Error::Truncated { what: "checkpoint" })?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("header length {len} is implausible"),
        });
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::Truncated { what: "checkpoint" })?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let params = ParamStore::read_from(r)?;
    Ok((header, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, params: &ParamStore, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, header, params, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamStore)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Saves the base weights of `model` (adapters excluded).
pub fn save_model(path: impl AsRef<Path>, model: &Denoiser, diffusion_steps: usize, step: u64, dtype: Dtype) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Model,
        denoiser: model.config.clone(),
        diffusion_steps,
        step,
        base_hash: None,
        lora: None,
    };
    save_checkpoint(path, &header, &base_params(&model.params), dtype)
}

/// Loads a model checkpoint; returns the model and its diffusion step count.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Denoiser, CheckpointHeader)> {
    let (header, params) = load_checkpoint(path)?;
    if header.kind != CheckpointKind::Model {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: "expected a model checkpoint, found an adapter".into(),
        });
    }
    let model = Denoiser::from_parts(header.denoiser.clone(), params)?;
    Ok((model, header))
}

/// Saves only the `lora.` tensors of `model`, tagged with `base_hash`.
pub fn save_adapters(
    path: impl AsRef<Path>,
    model: &Denoiser,
    base_hash: &str,
    lora: &LoraConfig,
    diffusion_steps: usize,
    step: u64,
) -> Result<()> {
    let adapters = adapter_params(&model.params);
    if adapters.is_empty() {
        return Err(Error::invalid("model has no adapters to save"));
    }
    let header = CheckpointHeader {
        kind: CheckpointKind::Adapter,
        denoiser: model.config.clone(),
        diffusion_steps,
        step,
        base_hash: Some(base_hash.to_string()),
        lora: Some(lora.clone()),
    };
    save_checkpoint(path, &header, &adapters, Dtype::F64)
}

/// Loads adapters onto `base`, which must hash to the value recorded at
/// training time. Base tensors are frozen afterwards.
pub fn load_adapters(path: impl AsRef<Path>, base: &mut Denoiser) -> Result<CheckpointHeader> {
    let (header, adapters) = load_checkpoint(path)?;
    if header.kind != CheckpointKind::Adapter {
        return Err(Error::Malformed {
            what: "adapter checkpoint",
            detail: "expected an adapter checkpoint, found a model".into(),
        });
    }
    let expected = header.base_hash.clone().unwrap_or_default();
    let found = params_hash(&base.params);
    if expected != found {
        return Err(Error::BaseMismatch { expected, found });
    }
    if adapters.names().any(|n| !n.starts_with(PREFIX)) {
        return Err(Error::Malformed {
            what: "adapter checkpoint",
            detail: "contains non-adapter tensors".into(),
        });
    }
    base.params.freeze_all();
    base.params.extend(adapters);
    base.lora_scale = header.lora.as_ref().map_or(1.0, |l| l.scale);
    Ok(header)
}
