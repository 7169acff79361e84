//! Versioned parameter checkpoints.
//!
//! A checkpoint is a JSON blob keyed by subnetwork name. Doubles survive a
//! save/load round trip bit-exactly (shortest-representation encoding that
//! parses back to the identical bits).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlob {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self, requires_grad: bool) -> Result<Tensor, AutodiffError> {
        let mut t = Tensor::new(self.shape.clone(), self.data.clone())?;
        t.requires_grad = requires_grad;
        Ok(t)
    }
}

/// Parameter groups keyed by subnetwork name (`encoder`, `f_theta`,
/// `g_phi`, `embeddings`, ...).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub subnetworks: BTreeMap<String, Vec<TensorBlob>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            subnetworks: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensors: &[&Tensor]) {
        self.subnetworks.insert(
            name.to_string(),
            tensors.iter().map(|t| TensorBlob::from_tensor(t)).collect(),
        );
    }

    pub fn group(&self, name: &str) -> Result<&[TensorBlob], AutodiffError> {
        self.subnetworks
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| AutodiffError::Checkpoint(format!("missing subnetwork '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        fs::write(path, json).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let json = fs::read_to_string(path).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&json).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
