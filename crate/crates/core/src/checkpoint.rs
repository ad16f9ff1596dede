//! Shape-tagged JSON tensor files shared by model checkpoints and
//! hyper-prototype snapshots. f64 values survive a write/read cycle bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

pub const TENSOR_FORMAT: &str = "fedhpro-tensors-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedTensor {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub format: String,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        TensorFile {
            format: TENSOR_FORMAT.to_string(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FedError::InvalidConfig(format!("tensor file lacks '{name}'")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tf: TensorFile = serde_json::from_str(s)?;
        if tf.format != TENSOR_FORMAT {
            return Err(FedError::SchemaVersion {
                found: tf.format,
                expected: TENSOR_FORMAT.to_string(),
            });
        }
        for t in &tf.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(FedError::shape("TensorFile", n, t.data.len()));
            }
        }
        Ok(tf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| FedError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::from_json(&s)
    }
}
