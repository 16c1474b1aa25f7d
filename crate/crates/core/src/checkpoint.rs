//! Model checkpoints: a TOML header (format version, model and data
//! configuration, tensor layout) followed by the parameters as
//! little-endian f64, in canonical parameter order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::formats::{frame, split_framed, write_atomic};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::pipeline::DataConfig;
use crate::tensor::Tensor;
use crate::{Error, Result};

const CKPT_MAGIC: &str = "SACONV-CKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    epochs: usize,
    model: ModelConfig,
    data: DataConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Preprocessing the model was trained with.
    pub data: DataConfig,
    pub seed: u64,
    pub epochs: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: self.seed,
            epochs: self.epochs,
            model: self.model.config.clone(),
            data: self.data.clone(),
            tensors: params
                .names()
                .into_iter()
                .zip(params.iter())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = toml::to_string(&header).expect("header serialises");
        let payload: Vec<u8> = params
            .iter()
            .into_iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        frame(CKPT_MAGIC, &text, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (text, payload) = split_framed(bytes, CKPT_MAGIC, path)?;
        let version: toml::Value =
            toml::from_str(text).map_err(|e| Error::Format(format!("{}: bad checkpoint header: {e}", path.display())))?;
        match version.get("format_version").and_then(|v| v.as_integer()) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as i64 => {}
            other => {
                return Err(Error::Version(format!(
                    "{}: checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                    path.display(),
                    other.map_or("missing".to_string(), |v| v.to_string())
                )))
            }
        }
        let header: Header = toml::from_str(text)
            .map_err(|e| Error::Version(format!("{}: checkpoint header does not match this version: {e}", path.display())))?;
        header
            .model
            .validate()
            .map_err(|e| Error::Version(format!("{}: stored model config is invalid: {e}", path.display())))?;

        let expected: Vec<TensorEntry> = ModelParams::expected_shapes(&header.model)
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        if expected != header.tensors {
            return Err(Error::Version(format!(
                "{}: stored tensors do not match the stored model config",
                path.display()
            )));
        }
        let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "{}: payload has {} bytes, header implies {}",
                path.display(),
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = ModelParams::init(&header.model, 0)?;
        for (t, e) in params.iter_mut().into_iter().zip(&expected) {
            let data: Vec<f64> = values.by_ref().take(t.len()).collect();
            *t = Tensor::new(e.shape.clone(), data)?;
        }
        Ok(Checkpoint {
            model: Model::from_parts(header.model, params)?,
            data: header.data,
            seed: header.seed,
            epochs: header.epochs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
