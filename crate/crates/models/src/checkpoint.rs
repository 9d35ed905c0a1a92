//! Versioned checkpoint files: a safetensors container whose metadata records the
//! format version, the backbone spec, the training seed and the epoch.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::backbone::{build_model_seeded, BackboneSpec, ModelHandle};
use crate::ModelError;

pub const FORMAT: &str = "ovafuse-checkpoint";
pub const FORMAT_VERSION: &str = "1";

/// Header fields of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub spec: BackboneSpec,
    pub seed: u64,
    pub epoch: usize,
    pub model_id: String,
}

fn corrupt(path: &Path, reason: impl ToString) -> ModelError {
    ModelError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes every parameter and buffer of `model` to `path`.
pub fn save_checkpoint(model: &ModelHandle, path: &Path) -> Result<(), ModelError> {
    let mut blobs = Vec::new();
    for (name, tensor) in model.params.named_tensors() {
        let values = tensor.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        blobs.push((name.to_string(), tensor.dims().to_vec(), bytes));
    }
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| corrupt(path, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec_json = serde_json::to_string(&model.spec).expect("spec serializes");
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("spec".to_string(), spec_json),
        ("seed".to_string(), model.seed.to_string()),
        ("epoch".to_string(), model.epoch.to_string()),
        ("model_id".to_string(), model.id().to_string()),
    ]);
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| corrupt(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| ModelError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    // Write-then-rename so an interrupted save never leaves a truncated checkpoint.
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes).map_err(|source| ModelError::Io {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, ModelError> {
    if !path.is_file() {
        return Err(ModelError::CheckpointNotFound(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_info(path: &Path, bytes: &[u8]) -> Result<CheckpointInfo, ModelError> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(path, e))?;
    let meta = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| corrupt(path, "no metadata header"))?;
    let field = |key: &str| meta.get(key).ok_or_else(|| corrupt(path, format!("missing `{key}`")));
    if field("format")? != FORMAT {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let spec: BackboneSpec = serde_json::from_str(field("spec")?).map_err(|e| corrupt(path, e))?;
    Ok(CheckpointInfo {
        spec,
        seed: field("seed")?.parse().map_err(|e| corrupt(path, e))?,
        epoch: field("epoch")?.parse().map_err(|e| corrupt(path, e))?,
        model_id: field("model_id")?.clone(),
    })
}

/// Reads only the header of a checkpoint.
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo, ModelError> {
    parse_info(path, &read_bytes(path)?)
}

/// Rebuilds the model recorded in `path`, whatever its spec.
pub fn open_checkpoint(path: &Path) -> Result<ModelHandle, ModelError> {
    let info = read_checkpoint_info(path)?;
    load_checkpoint(info.spec, path)
}

/// Loads a checkpoint written by [`save_checkpoint`] for a model built from `spec`.
///
/// The `pretrained` flag is not compared: a checkpoint already holds the weights.
pub fn load_checkpoint(spec: BackboneSpec, path: &Path) -> Result<ModelHandle, ModelError> {
    let bytes = read_bytes(path)?;
    let info = parse_info(path, &bytes)?;
    if info.spec.kind != spec.kind || info.spec.scale != spec.scale || info.spec.num_classes != spec.num_classes {
        return Err(ModelError::SpecMismatch {
            expected: spec,
            found: info.spec,
        });
    }
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e))?;
    let build_spec = BackboneSpec {
        pretrained: false,
        ..spec
    };
    let mut model = build_model_seeded(build_spec, info.seed)?;
    model.spec = spec;
    let expected: Vec<String> = model.params.names().map(str::to_string).collect();
    if tensors.len() != expected.len() {
        return Err(corrupt(
            path,
            format!("holds {} tensors, model has {}", tensors.len(), expected.len()),
        ));
    }
    for name in &expected {
        let view = tensors
            .tensor(name)
            .map_err(|_| corrupt(path, format!("missing tensor `{name}`")))?;
        if view.dtype() != Dtype::F32 {
            return Err(corrupt(path, format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = candle_core::Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
        model.params.assign(name, &t).map_err(|e| corrupt(path, e))?;
    }
    model.seed = info.seed;
    model.epoch = info.epoch;
    Ok(model)
}
