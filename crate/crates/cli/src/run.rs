//! Run-directory bookkeeping.

use std::path::Path;

use rawdiff::config::RunConfig;
use rawdiff::{Error, Result};
use serde_json::{json, Value};

use crate::BUILD_ID;

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `run.json` (build id, command line, extra fields) into `dir`.
pub fn write_run_info(dir: &Path, command: &str, extra: Value) -> Result<()> {
    let mut info = json!({
        "build": BUILD_ID,
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
    });
    if let (Some(map), Value::Object(more)) = (info.as_object_mut(), extra) {
        map.extend(more);
    }
    std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}

/// Writes `config.txt`, which parses back to `cfg`.
pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join("config.txt"), cfg.to_flat())?;
    Ok(())
}

/// Config file (or defaults) with `key=value` overrides applied in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set {o:?}: expected key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}
