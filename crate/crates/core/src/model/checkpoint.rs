use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ParNet};
use crate::autodiff::{Group, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "parnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// On-disk model container. Floats are written in shortest round-trip form
/// and parsed exactly, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn of(model: &ParNet) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            seed: model.seed,
            params: model
                .store
                .iter()
                .map(|p| SavedParam {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Rebuilds the model skeleton from the config and overwrites every
    /// parameter by name.
    pub fn into_model(self) -> Result<ParNet> {
        let mut model = ParNet::new(self.config, self.seed)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for saved in self.params {
            let id = model
                .store
                .find(&saved.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {:?}", saved.name)))?;
            let slot = &mut model.store.get_mut(id).value;
            if slot.shape() != saved.value.shape() || saved.value.numel() != saved.value.data().len() {
                return Err(Error::shape("checkpoint", saved.value.shape(), slot.shape()));
            }
            *slot = saved.value;
        }
        Ok(model)
    }
}

impl ParNet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, Checkpoint::of(self).to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&s)?.into_model()
    }

    /// Hex sha256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        let json = Checkpoint::of(self).to_json()?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}
