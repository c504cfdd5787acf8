//! Checkpoints: an index file (JSON) naming every parameter with its shape
//! and byte range, next to a blob of SCPT records concatenated in the
//! model's parameter order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::InputSettings;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scpt::{self, ScptTensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format_version: u32,
    model: ModelConfig,
    input: InputSettings,
    epoch: usize,
    tensors_file: String,
    checksum: String,
    params: Vec<Entry>,
}

/// A model together with the input preparation it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub input: InputSettings,
    pub epoch: usize,
}

fn blob_path(index: &Path) -> PathBuf {
    index.with_extension("scpt")
}

/// Write `<path>` (index) and `<path stem>.scpt` (tensors).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(ckpt.model.params().len());
    for (name, t) in ckpt.model.params() {
        let bytes = ScptTensor::from_tensor(t).encode();
        params.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let blob_file = blob_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let index = Index {
        format_version: CHECKPOINT_VERSION,
        model: ckpt.model.config.clone(),
        input: ckpt.input.clone(),
        epoch: ckpt.epoch,
        tensors_file: blob_file
            .file_name()
            .expect("checkpoint path has a file name")
            .to_string_lossy()
            .into_owned(),
        checksum: format!("{:016x}", scpt::checksum(&blob)),
        params,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let index: Index = serde_json::from_value(raw).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let blob_file = path.with_file_name(&index.tensors_file);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let actual = scpt::checksum(&blob);
    let expected = u64::from_str_radix(&index.checksum, 16)
        .map_err(|_| Error::corrupt(path, "checksum is not hexadecimal"))?;
    if actual != expected {
        return Err(Error::Checksum {
            path: blob_file,
            expected,
            actual,
        });
    }
    let mut params = Vec::with_capacity(index.params.len());
    for e in &index.params {
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::corrupt(&blob_file, format!("{} lies outside the file", e.name)))?;
        let t = ScptTensor::decode(bytes, &blob_file)?.to_tensor()?;
        if t.shape() != e.shape {
            return Err(Error::corrupt(&blob_file, format!("{} has shape {:?}", e.name, t.shape())));
        }
        params.push((e.name.clone(), t));
    }
    Ok(Checkpoint {
        model: Model::from_params(index.model, params)?,
        input: index.input,
        epoch: index.epoch,
    })
}
