use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::models::{Network, SourceArch, SourceModel, TargetArch, TargetModel};
use super::params::ParamStore;
use crate::error::{Error, Result};

const FORMAT: &str = "prodding-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Source(SourceArch),
    Target(TargetArch),
}

/// Self-describing model container. Floats are written in shortest
/// round-trip form, so reloading is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub seed: u64,
    pub epoch: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_source(model: &SourceModel, seed: u64, epoch: usize) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            architecture: Architecture::Source(model.arch().clone()),
            num_classes: model.num_classes(),
            seed,
            epoch,
            params: model.store().clone(),
        }
    }

    pub fn from_target(model: &TargetModel, seed: u64, epoch: usize) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            architecture: Architecture::Target(model.arch().clone()),
            num_classes: model.num_classes(),
            seed,
            epoch,
            params: model.store().clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn into_source(self) -> Result<SourceModel> {
        match self.architecture {
            Architecture::Source(arch) => SourceModel::from_parts(arch, self.params),
            Architecture::Target(_) => Err(Error::invalid("checkpoint holds a target model")),
        }
    }

    pub fn into_target(self) -> Result<TargetModel> {
        match self.architecture {
            Architecture::Target(arch) => TargetModel::from_parts(arch, self.params),
            Architecture::Source(_) => Err(Error::invalid("checkpoint holds a source model")),
        }
    }
}
