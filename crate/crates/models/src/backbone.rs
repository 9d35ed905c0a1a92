//! Building backbones and running them on preprocessed images.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use ovafuse_core::preprocess::TARGET_SIZE;
use ovafuse_core::{BackboneKind, LogitMatrix, PreprocessedImage};

use crate::arch::convnext::ConvNeXtConfig;
use crate::arch::densenet::DenseNetConfig;
use crate::arch::efficientnet::EfficientNetConfig;
use crate::arch::resnet::ResNetConfig;
use crate::arch::swin::SwinConfig;
use crate::arch::{Architecture, Network, HEAD, NUM_CLASSES};
use crate::params::ParamStore;
use crate::ModelError;

/// Environment variable naming the directory of locally cached pretrained weights.
pub const MODEL_CACHE_ENV: &str = "MODEL_CACHE_DIR";

/// Input shape every backbone accepts: `[channels, height, width]`.
pub const INPUT_SHAPE: [usize; 3] = [3, TARGET_SIZE as usize, TARGET_SIZE as usize];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// The published layouts.
    Paper,
    /// Small instances of each family for offline verification.
    Tiny,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Scale::Paper),
            "tiny" => Ok(Scale::Tiny),
            other => Err(format!("unknown scale `{other}` (expected paper or tiny)")),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub scale: Scale,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default = "two")]
    pub num_classes: usize,
}

fn two() -> usize {
    NUM_CLASSES
}

impl BackboneSpec {
    pub fn tiny(kind: BackboneKind) -> Self {
        BackboneSpec {
            kind,
            scale: Scale::Tiny,
            pretrained: false,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn paper(kind: BackboneKind, pretrained: bool) -> Self {
        BackboneSpec {
            kind,
            scale: Scale::Paper,
            pretrained,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes != NUM_CLASSES {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.scale == Scale::Tiny && self.pretrained {
            return Err(ModelError::InvalidSpec("tiny models have no pretrained weights".into()));
        }
        Ok(())
    }

    /// Where pretrained weights for this spec are looked up.
    pub fn weights_path(&self) -> PathBuf {
        let file = format!("{}-{}.safetensors", self.kind.as_str(), self.scale.as_str());
        match std::env::var_os(MODEL_CACHE_ENV) {
            Some(dir) => PathBuf::from(dir).join(file),
            None => PathBuf::from(format!("${MODEL_CACHE_ENV}")).join(file),
        }
    }

    fn architecture(&self) -> Box<dyn Architecture> {
        use BackboneKind as K;
        match (self.kind, self.scale) {
            (K::ResidualCnn, Scale::Paper) => Box::new(ResNetConfig::paper()),
            (K::ResidualCnn, Scale::Tiny) => Box::new(ResNetConfig::tiny()),
            (K::DenseConnectedCnn, Scale::Paper) => Box::new(DenseNetConfig::paper()),
            (K::DenseConnectedCnn, Scale::Tiny) => Box::new(DenseNetConfig::tiny()),
            (K::CompoundScaledCnn, Scale::Paper) => Box::new(EfficientNetConfig::paper()),
            (K::CompoundScaledCnn, Scale::Tiny) => Box::new(EfficientNetConfig::tiny()),
            (K::WindowedAttentionTransformer, Scale::Paper) => Box::new(SwinConfig::paper()),
            (K::WindowedAttentionTransformer, Scale::Tiny) => Box::new(SwinConfig::tiny()),
            (K::ModernizedDepthwiseCnn, Scale::Paper) => Box::new(ConvNeXtConfig::paper()),
            (K::ModernizedDepthwiseCnn, Scale::Tiny) => Box::new(ConvNeXtConfig::tiny()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A built backbone with its parameters.
pub struct ModelHandle {
    pub spec: BackboneSpec,
    pub(crate) params: ParamStore,
    pub(crate) net: Box<dyn Network>,
    pub(crate) mode: Mode,
    /// Seed that initialized the parameters (or trained them, once trained).
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("spec", &self.spec)
            .field("mode", &self.mode)
            .field("parameters", &self.parameter_count())
            .field("seed", &self.seed)
            .field("epoch", &self.epoch)
            .finish()
    }
}

/// Builds a model initialized from seed 0.
pub fn build_model(spec: BackboneSpec) -> Result<ModelHandle, ModelError> {
    build_model_seeded(spec, 0)
}

pub fn build_model_seeded(spec: BackboneSpec, seed: u64) -> Result<ModelHandle, ModelError> {
    spec.validate()?;
    let mut params = ParamStore::new(seed);
    let net = spec.architecture().build(&mut params)?;
    let model = ModelHandle {
        spec,
        params,
        net,
        mode: Mode::Eval,
        seed,
        epoch: 0,
    };
    if spec.pretrained {
        load_pretrained(&model)?;
    }
    Ok(model)
}

/// Copies every non-head tensor from the cached weight file into `model`.
fn load_pretrained(model: &ModelHandle) -> Result<(), ModelError> {
    let path = model.spec.weights_path();
    if !path.is_file() {
        return Err(ModelError::WeightsUnavailable { path });
    }
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu).map_err(|e| ModelError::CorruptCheckpoint {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    for name in model.params.names() {
        if name == HEAD || name.starts_with(&format!("{HEAD}.")) {
            continue;
        }
        let t = tensors.get(name).ok_or_else(|| ModelError::CorruptCheckpoint {
            path: path.clone(),
            reason: format!("missing tensor `{name}`"),
        })?;
        model.params.assign(name, t).map_err(|e| ModelError::CorruptCheckpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

impl ModelHandle {
    pub fn id(&self) -> &'static str {
        self.spec.kind.as_str()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Raw forward pass on an `(N, 3, 224, 224)` tensor, honouring the current mode.
    pub fn forward_tensor(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[1..] != INPUT_SHAPE {
            return Err(ModelError::Shape {
                index: None,
                expected: INPUT_SHAPE.to_vec(),
                actual: dims.to_vec(),
            });
        }
        Ok(self.net.forward_t(batch, self.mode == Mode::Train)?)
    }

    /// Eval-mode logits for `(N, 3, 224, 224)`, computed in chunks of the family's batch size.
    pub fn logits_tensor(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        if self.mode != Mode::Eval {
            return Err(ModelError::NotInEvalMode);
        }
        let n = batch.dim(0)?;
        if n == 0 {
            return Ok(Tensor::zeros((0, NUM_CLASSES), DType::F32, &Device::Cpu)?);
        }
        let chunk = self.spec.kind.default_batch_size();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            parts.push(self.forward_tensor(&batch.narrow(0, start, len)?)?);
            start += len;
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// One `[notinfected, infected]` row per image, in input order.
    pub fn forward_logits(&self, batch: &[PreprocessedImage]) -> Result<LogitMatrix, ModelError> {
        if self.mode != Mode::Eval {
            return Err(ModelError::NotInEvalMode);
        }
        let logits = self.logits_tensor(&stack_images(batch)?)?;
        logits_to_matrix(self.id(), &logits)
    }

    /// Every stored tensor (trainable and buffers) by name.
    pub fn state(&self) -> HashMap<String, Tensor> {
        self.params
            .named_tensors()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect()
    }
}

/// Packs images into an `(N, 3, 224, 224)` tensor, rejecting any other shape.
pub fn stack_images(batch: &[PreprocessedImage]) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(batch.len() * INPUT_SHAPE.iter().product::<usize>());
    for (i, img) in batch.iter().enumerate() {
        if img.shape != INPUT_SHAPE || img.data.len() != INPUT_SHAPE.iter().product::<usize>() {
            return Err(ModelError::Shape {
                index: Some(i),
                expected: INPUT_SHAPE.to_vec(),
                actual: img.shape.to_vec(),
            });
        }
        data.extend_from_slice(&img.data);
    }
    let [c, h, w] = INPUT_SHAPE;
    Ok(Tensor::from_vec(data, (batch.len(), c, h, w), &Device::Cpu)?)
}

pub(crate) fn logits_to_matrix(model_id: &str, logits: &Tensor) -> Result<LogitMatrix, ModelError> {
    let rows: Vec<[f32; 2]> = logits
        .to_vec2::<f32>()?
        .into_iter()
        .map(|r| [r[0], r[1]])
        .collect();
    let matrix = LogitMatrix::new(model_id, rows);
    if !matrix.is_finite() {
        return Err(ModelError::NonFiniteLogits {
            model_id: model_id.to_string(),
        });
    }
    Ok(matrix)
}
