//! Parameter snapshots: one FSEB file per named tensor plus `index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fseb::{read_embeddings, write_atomic, write_embeddings};
use crate::autodiff::{ParameterStore, Shape, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::scoring::{Mechanisms, ScorerDims};

pub const INDEX_FILE: &str = "index.json";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: PathBuf,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotIndex {
    pub version: u32,
    pub dims: ScorerDims,
    pub mechanisms: Mechanisms,
    pub tensors: Vec<TensorEntry>,
}

fn file_name(param: &str) -> String {
    let safe: String = param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.fseb")
}

/// Writes every model parameter (narrowed to f32) and the index into `dir`.
pub fn save_snapshot(model: &Model, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        let file = PathBuf::from(file_name(&p.name));
        let shape = p.value.shape();
        let as_matrix = match shape {
            Shape::Matrix(..) => p.value.clone(),
            _ => Tensor::matrix(1, p.value.len(), p.value.data().to_vec()),
        };
        write_embeddings(&as_matrix, dir.join(&file))?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            file,
            shape,
        });
    }
    let index = SnapshotIndex {
        version: SNAPSHOT_VERSION,
        dims: model.dims(),
        mechanisms: model.mechanisms,
        tensors,
    };
    let path = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Loads a snapshot directory (or its index file) back into a model.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let index_path = if path.is_dir() {
        path.join(INDEX_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: SnapshotIndex = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: index_path.clone(),
        source: e,
    })?;
    if index.version != SNAPSHOT_VERSION {
        return Err(Error::Validation {
            what: index_path.display().to_string(),
            detail: format!("unsupported snapshot version {}", index.version),
        });
    }
    let mut store = ParameterStore::new();
    for t in &index.tensors {
        let file = dir.join(&t.file);
        let m = read_embeddings(&file)?;
        if m.len() != t.shape.numel() {
            return Err(Error::Validation {
                what: file.display().to_string(),
                detail: format!("{} values for a {} tensor", m.len(), t.shape),
            });
        }
        store.insert(t.name.clone(), Tensor::from_shape(t.shape, m.into_data()))?;
    }
    let model = Model::from_store(store, index.mechanisms)?;
    if model.dims() != index.dims {
        return Err(Error::Validation {
            what: index_path.display().to_string(),
            detail: "tensor shapes disagree with the recorded dimensions".into(),
        });
    }
    Ok(model)
}
