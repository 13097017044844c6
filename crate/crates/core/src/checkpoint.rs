//! Self-describing tensor archives for model checkpoints and adapter sets.
//!
//! The container is safetensors with `F64` tensors. The free-form metadata
//! map carries `format_version`, `kind` (`model` | `adapter`) and a JSON
//! payload describing the contents.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterSpec;
use crate::model::{ModelConfig, ModelError, TransformerModel};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub metadata: HashMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write_archive(
    path: &Path,
    tensors: &[(String, Vec<usize>, &[f64])],
    metadata: HashMap<String, String>,
) -> Result<(), CheckpointError> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, shape, data)| {
            let raw = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), shape.clone(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| CheckpointError::Format(format!("{name}: {e:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut metadata = metadata;
    metadata.insert("format_version".into(), FORMAT_VERSION.into());
    let buf = safetensors::tensor::serialize(views, &Some(metadata))
        .map_err(|e| CheckpointError::Format(format!("serialize: {e:?}")))?;

    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive, CheckpointError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    parse_archive(&buf)
}

pub(crate) fn parse_archive(buf: &[u8]) -> Result<Archive, CheckpointError> {
    let (_, meta) = SafeTensors::read_metadata(buf)
        .map_err(|e| CheckpointError::Format(format!("header: {e:?}")))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    match metadata.get("format_version") {
        Some(v) if v == FORMAT_VERSION => {}
        Some(v) => {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {v}"
            )))
        }
        None => return Err(CheckpointError::Format("missing format_version".into())),
    }
    let st = SafeTensors::deserialize(buf)
        .map_err(|e| CheckpointError::Format(format!("body: {e:?}")))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(CheckpointError::Format(format!(
                "{name}: expected F64, found {:?}",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(
            name,
            Tensor {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok(Archive { metadata, tensors })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    adapters: Vec<AdapterSpec>,
    active_language: Option<String>,
}

/// Writes the full model (backbone, heads, attached adapters) plus any
/// extra metadata entries.
pub fn save_model(
    model: &TransformerModel,
    path: &Path,
    extra: &[(&str, String)],
) -> Result<(), CheckpointError> {
    let header = ModelHeader {
        config: model.config().clone(),
        adapters: model.adapter_bank().specs(),
        active_language: model.active_language().map(str::to_owned),
    };
    let mut metadata = HashMap::new();
    metadata.insert("kind".into(), "model".into());
    metadata.insert(
        "model".into(),
        serde_json::to_string(&header).expect("header serializes"),
    );
    for (k, v) in extra {
        metadata.insert((*k).to_owned(), v.clone());
    }
    let tensors: Vec<_> = model
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.shape.clone(), p.data.as_slice()))
        .collect();
    write_archive(path, &tensors, metadata)
}

pub fn load_model(path: &Path) -> Result<TransformerModel, CheckpointError> {
    let archive = read_archive(path)?;
    model_from_archive(&archive)
}

pub fn model_from_archive(archive: &Archive) -> Result<TransformerModel, CheckpointError> {
    if archive.kind() != Some("model") {
        return Err(CheckpointError::Format(format!(
            "expected a model archive, found {:?}",
            archive.kind()
        )));
    }
    let header: ModelHeader = archive
        .metadata
        .get("model")
        .ok_or_else(|| CheckpointError::Format("missing model header".into()))
        .and_then(|s| {
            serde_json::from_str(s)
                .map_err(|e| CheckpointError::Format(format!("model header: {e}")))
        })?;
    let mut model = TransformerModel::new(header.config)?;
    model.attach_adapters(&header.adapters)?;
    let expected = model.params().len();
    if archive.tensors.len() != expected {
        return Err(CheckpointError::Format(format!(
            "archive holds {} tensors, model expects {expected}",
            archive.tensors.len()
        )));
    }
    for (_, p) in model.params_mut().iter_mut() {
        let t = archive
            .tensors
            .get(&p.name)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}", p.name)))?;
        if t.shape != p.shape {
            return Err(CheckpointError::Format(format!(
                "{}: shape {:?} != expected {:?}",
                p.name, t.shape, p.shape
            )));
        }
        p.data.copy_from_slice(&t.data);
    }
    model.active_language = None;
    if let Some(lang) = header.active_language {
        model.set_active_language(&lang)?;
    }
    Ok(model)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Reads one metadata entry without materializing the model.
pub fn read_metadata_entry(path: &Path, key: &str) -> Result<Option<String>, CheckpointError> {
    Ok(read_archive(path)?.metadata.get(key).cloned())
}

/// Copies every tensor whose name starts with `prefix` from `archive` into
/// `model`. All shapes are checked before anything is written.
pub fn restore_parameters(
    model: &mut TransformerModel,
    archive: &Archive,
    prefix: &str,
) -> Result<Vec<String>, CheckpointError> {
    let mut plan = Vec::new();
    for (id, p) in model.params().iter() {
        if !p.name.starts_with(prefix) {
            continue;
        }
        let t = archive
            .tensors
            .get(&p.name)
            .ok_or_else(|| CheckpointError::Format(format!("archive lacks {}", p.name)))?;
        if t.shape != p.shape {
            return Err(CheckpointError::Format(format!(
                "{}: shape {:?} != expected {:?}",
                p.name, t.shape, p.shape
            )));
        }
        plan.push((id, t));
    }
    if plan.is_empty() {
        return Err(CheckpointError::Format(format!(
            "model has no parameters under {prefix:?}"
        )));
    }
    let mut names = Vec::with_capacity(plan.len());
    for (id, t) in plan {
        let p = model.params_mut().get_mut(id);
        p.data.copy_from_slice(&t.data);
        names.push(p.name.clone());
    }
    Ok(names)
}
