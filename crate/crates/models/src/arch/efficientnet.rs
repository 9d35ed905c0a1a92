//! Compound-scaled CNN built from fused and depthwise inverted-residual blocks.
//!
//! A base stage table is scaled jointly in width and depth; channel counts are
//! rounded to multiples of 8.

use candle_core::{Module, Result, Tensor};

use super::{Architecture, Network, HEAD, NUM_CLASSES};
use crate::layers::{global_avg_pool, sigmoid, BatchNorm2d, Conv2d, ConvOpts, DepthwiseConv2d, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockType {
    /// Expansion and spatial filtering in one full 3×3 conv.
    Fused,
    /// 1×1 expansion, depthwise 3×3, squeeze-excitation, 1×1 projection.
    MbConv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub block: BlockType,
    pub expand: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficientNetConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<Stage>,
    pub head_channels: usize,
}

pub fn make_divisible(value: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let rounded = (((value + d / 2.0) / d).floor() * d).max(d);
    let rounded = if rounded < 0.9 * value { rounded + d } else { rounded };
    rounded as usize
}

const fn stage(block: BlockType, expand: usize, stride: usize, out_channels: usize, layers: usize) -> Stage {
    Stage {
        block,
        expand,
        stride,
        out_channels,
        layers,
    }
}

/// Small-variant base table.
const BASE: [Stage; 6] = [
    stage(BlockType::Fused, 1, 1, 24, 2),
    stage(BlockType::Fused, 4, 2, 48, 4),
    stage(BlockType::Fused, 4, 2, 64, 4),
    stage(BlockType::MbConv, 4, 2, 128, 6),
    stage(BlockType::MbConv, 6, 1, 160, 9),
    stage(BlockType::MbConv, 6, 2, 256, 15),
];

impl EfficientNetConfig {
    /// Scales the first `num_stages` rows of the base table.
    pub fn scaled(width: f64, depth: f64, num_stages: usize) -> Self {
        let stages = BASE[..num_stages]
            .iter()
            .map(|s| Stage {
                out_channels: make_divisible(s.out_channels as f64 * width, 8),
                layers: (s.layers as f64 * depth).ceil() as usize,
                ..*s
            })
            .collect();
        EfficientNetConfig {
            stem_channels: make_divisible(24.0 * width, 8),
            stem_kernel: 3,
            stem_stride: 2,
            stages,
            head_channels: make_divisible(1280.0 * width, 8),
        }
    }

    pub fn paper() -> Self {
        Self::scaled(1.0, 1.0, BASE.len())
    }

    pub fn tiny() -> Self {
        EfficientNetConfig {
            stem_kernel: 8,
            stem_stride: 8,
            head_channels: 128,
            ..Self::scaled(0.5, 0.25, 4)
        }
    }
}

struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: bool,
}

impl ConvBnAct {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, act: bool) -> Result<Self> {
        let padding = if kernel % 2 == 1 { kernel / 2 } else { 0 };
        Ok(ConvBnAct {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, ConvOpts::new(stride, padding))?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
            act,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward_t(&self.conv.forward(x)?, train)?;
        if self.act {
            y.silu()
        } else {
            Ok(y)
        }
    }
}

struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let s = self.expand.forward(&self.reduce.forward(&s)?.silu()?)?;
        x.broadcast_mul(&sigmoid(&s)?)
    }
}

enum Block {
    Fused {
        expand: Option<ConvBnAct>,
        project: ConvBnAct,
        residual: bool,
    },
    MbConv {
        expand: ConvBnAct,
        depthwise: DepthwiseConv2d,
        dw_bn: BatchNorm2d,
        se: SqueezeExcite,
        project: ConvBnAct,
        residual: bool,
    },
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, s: &Stage, c_in: usize, stride: usize) -> Result<Self> {
        let c_out = s.out_channels;
        let residual = stride == 1 && c_in == c_out;
        let mid = c_in * s.expand;
        Ok(match s.block {
            BlockType::Fused if s.expand == 1 => Block::Fused {
                expand: None,
                project: ConvBnAct::new(store, &format!("{name}.project"), c_in, c_out, 3, stride, true)?,
                residual,
            },
            BlockType::Fused => Block::Fused {
                expand: Some(ConvBnAct::new(store, &format!("{name}.expand"), c_in, mid, 3, stride, true)?),
                project: ConvBnAct::new(store, &format!("{name}.project"), mid, c_out, 1, 1, false)?,
                residual,
            },
            BlockType::MbConv => {
                let squeeze = (c_in / 4).max(1);
                let se_opts = ConvOpts::default().with_bias();
                Block::MbConv {
                    expand: ConvBnAct::new(store, &format!("{name}.expand"), c_in, mid, 1, 1, true)?,
                    depthwise: DepthwiseConv2d::new(store, &format!("{name}.dw"), mid, 3, stride, false)?,
                    dw_bn: BatchNorm2d::new(store, &format!("{name}.dw_bn"), mid)?,
                    se: SqueezeExcite {
                        reduce: Conv2d::new(store, &format!("{name}.se.reduce"), mid, squeeze, 1, se_opts)?,
                        expand: Conv2d::new(store, &format!("{name}.se.expand"), squeeze, mid, 1, se_opts)?,
                    },
                    project: ConvBnAct::new(store, &format!("{name}.project"), mid, c_out, 1, 1, false)?,
                    residual,
                }
            }
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (y, residual) = match self {
            Block::Fused {
                expand,
                project,
                residual,
            } => {
                let y = match expand {
                    Some(e) => e.forward_t(x, train)?,
                    None => x.clone(),
                };
                (project.forward_t(&y, train)?, *residual)
            }
            Block::MbConv {
                expand,
                depthwise,
                dw_bn,
                se,
                project,
                residual,
            } => {
                let y = expand.forward_t(x, train)?;
                let y = dw_bn.forward_t(&depthwise.forward(&y)?, train)?.silu()?;
                (project.forward_t(&se.forward(&y)?, train)?, *residual)
            }
        };
        if residual {
            y + x
        } else {
            Ok(y)
        }
    }
}

pub struct EfficientNet {
    stem: ConvBnAct,
    blocks: Vec<Block>,
    top: ConvBnAct,
    head: Linear,
}

impl Architecture for EfficientNetConfig {
    fn build(&self, store: &mut ParamStore) -> Result<Box<dyn Network>> {
        let stem = ConvBnAct::new(store, "stem", 3, self.stem_channels, self.stem_kernel, self.stem_stride, true)?;
        let mut c_in = self.stem_channels;
        let mut blocks = Vec::new();
        for (si, s) in self.stages.iter().enumerate() {
            for l in 0..s.layers {
                let stride = if l == 0 { s.stride } else { 1 };
                blocks.push(Block::new(store, &format!("stage{}.{l}", si + 1), s, c_in, stride)?);
                c_in = s.out_channels;
            }
        }
        let top = ConvBnAct::new(store, "top", c_in, self.head_channels, 1, 1, true)?;
        let head = Linear::new(store, HEAD, self.head_channels, NUM_CLASSES, true)?;
        Ok(Box::new(EfficientNet { stem, blocks, top, head }))
    }
}

impl Network for EfficientNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.stem.forward_t(x, train)?;
        for block in &self.blocks {
            x = block.forward_t(&x, train)?;
        }
        let x = self.top.forward_t(&x, train)?;
        self.head.forward(&global_avg_pool(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(12.0, 8), 16);
        assert_eq!(make_divisible(24.0, 8), 24);
        assert_eq!(make_divisible(3.0, 8), 8);
        assert_eq!(make_divisible(36.0, 8), 40);
    }

    #[test]
    fn scaling_keeps_block_kinds() {
        let t = EfficientNetConfig::tiny();
        assert_eq!(t.stages.len(), 4);
        assert!(t.stages.iter().all(|s| s.layers == 1 || s.layers == 2));
        assert_eq!(t.stages[3].block, BlockType::MbConv);
        assert_eq!(EfficientNetConfig::paper().stages.iter().map(|s| s.layers).sum::<usize>(), 40);
    }
}
