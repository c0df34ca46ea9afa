//! Named-parameter checkpoints.
//!
//! A checkpoint is a JSON document whose first field is the magic string
//! `"ATTNLAB1"`. Each parameter is stored with its name, shape and row-major
//! values; `f64` values round-trip exactly through JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "ATTNLAB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub params: Vec<StoredTensor>,
    /// Free-form payload (model config, optimizer state, training records).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            magic: MAGIC.to_string(),
            params,
            meta,
        }
    }

    /// Rebuilds a store with the saved names, shapes and values.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?);
        }
        Ok(store)
    }

    /// Writes saved values into an existing store with identical layout.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        store.copy_values_from(&self.to_store()?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the magic before attempting a full parse so that foreign
        // files give a clear message.
        let head = text.trim_start();
        if !head.starts_with(&format!("{{\"magic\":\"{MAGIC}\"")) {
            return Err(Error::Checkpoint(format!("missing {MAGIC} header")));
        }
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.magic != MAGIC {
            return Err(Error::Checkpoint(format!("unknown format {}", ck.magic)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
