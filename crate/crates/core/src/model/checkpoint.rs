//! Checkpoints: one CTR1 file per parameter plus a JSON manifest holding the
//! model config and the name → file map.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor};
use crate::numerics::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub precision: String,
    pub files: BTreeMap<String, String>,
}

pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, model: &Model<T>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (_, p) in model.params.iter() {
        let file = format!("{}.ctr1", p.name);
        save_tensor(dir.join(&file), &p.tensor)?;
        files.insert(p.name.clone(), file);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: model.config.clone(),
        seed: model.params.seed(),
        precision: T::NAME.to_string(),
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "checkpoint schema {} is not supported",
            manifest.schema_version
        )));
    }
    let mut model = build_model::<T>(&manifest.config, manifest.seed)?;
    if manifest.files.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {} parameters",
            manifest.files.len(),
            model.params.len()
        )));
    }
    for (name, file) in &manifest.files {
        let id = model
            .params
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}` in checkpoint")))?;
        model.params.set(id, load_tensor(dir.join(file))?)?;
    }
    Ok(model)
}
