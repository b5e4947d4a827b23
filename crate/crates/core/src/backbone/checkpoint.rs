use std::fs;
use std::path::Path;

use super::config::BackboneConfig;
use super::params::ParameterSet;
use crate::container;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADMT";

pub fn to_bytes(params: &ParameterSet) -> Result<Vec<u8>> {
    let meta = serde_json::json!({ "config": params.config() });
    let entries: Vec<(String, &_)> = (0..params.len())
        .map(|i| (params.name(i).to_string(), params.tensor(i)))
        .collect();
    let mut buf = Vec::new();
    container::write(&mut buf, MAGIC, &meta, &entries)?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    let (meta, tensors) = container::read(bytes, MAGIC)?;
    let config: BackboneConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::format(12, "metadata lacks config"))?,
    )?;
    ParameterSet::from_named(&config, tensors)
}

pub fn save(params: &ParameterSet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    from_bytes(&fs::read(path)?)
}
