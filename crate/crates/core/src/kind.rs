use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five backbone families. Each uses a distinct feature-extraction mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// DenseNet121-style dense connectivity.
    DenseConnectedCnn,
    /// ResNet18-style residual blocks.
    ResidualCnn,
    /// EfficientNetV2-style compound-scaled (fused-)MBConv stages.
    CompoundScaledCnn,
    /// Swin-style shifted-window self-attention.
    WindowedAttentionTransformer,
    /// ConvNeXt-style depthwise-conv blocks.
    ModernizedDepthwiseCnn,
}

impl BackboneKind {
    /// Fusion order of the five-member hybrid: Swin, ConvNeXt, DenseNet, ResNet, EfficientNet.
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::WindowedAttentionTransformer,
        BackboneKind::ModernizedDepthwiseCnn,
        BackboneKind::DenseConnectedCnn,
        BackboneKind::ResidualCnn,
        BackboneKind::CompoundScaledCnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::DenseConnectedCnn => "dense_connected_cnn",
            BackboneKind::ResidualCnn => "residual_cnn",
            BackboneKind::CompoundScaledCnn => "compound_scaled_cnn",
            BackboneKind::WindowedAttentionTransformer => "windowed_attention_transformer",
            BackboneKind::ModernizedDepthwiseCnn => "modernized_depthwise_cnn",
        }
    }

    /// Name of the published architecture this family stands in for.
    pub fn architecture_name(self) -> &'static str {
        match self {
            BackboneKind::DenseConnectedCnn => "DenseNet121",
            BackboneKind::ResidualCnn => "ResNet18",
            BackboneKind::CompoundScaledCnn => "EfficientNetV2",
            BackboneKind::WindowedAttentionTransformer => "Swin Transformer",
            BackboneKind::ModernizedDepthwiseCnn => "ConvNeXt",
        }
    }

    pub fn is_transformer(self) -> bool {
        self == BackboneKind::WindowedAttentionTransformer
    }

    /// Default training batch size: 16 for the transformer family, 32 otherwise.
    pub fn default_batch_size(self) -> usize {
        if self.is_transformer() {
            16
        } else {
            32
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dense_connected_cnn" | "densenet" | "densenet121" => BackboneKind::DenseConnectedCnn,
            "residual_cnn" | "resnet" | "resnet18" => BackboneKind::ResidualCnn,
            "compound_scaled_cnn" | "efficientnet" | "efficientnetv2" | "effnet" => {
                BackboneKind::CompoundScaledCnn
            }
            "windowed_attention_transformer" | "swin" | "swin_transformer" => {
                BackboneKind::WindowedAttentionTransformer
            }
            "modernized_depthwise_cnn" | "convnext" => BackboneKind::ModernizedDepthwiseCnn,
            _ => return Err(format!("unknown backbone kind `{s}`")),
        };
        Ok(kind)
    }
}
