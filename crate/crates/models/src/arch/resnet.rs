//! Residual CNN with basic (two 3×3 conv) blocks.

use candle_core::{Module, Result, Tensor};

use super::{Architecture, Network, HEAD, NUM_CLASSES};
use crate::layers::{global_avg_pool, max_pool_relu, BatchNorm2d, Conv2d, ConvOpts, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl ResNetConfig {
    /// 18-layer layout.
    pub fn paper() -> Self {
        ResNetConfig {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
        }
    }

    pub fn tiny() -> Self {
        ResNetConfig {
            stem_channels: 16,
            stem_kernel: 4,
            stem_stride: 4,
            widths: vec![16, 32, 64],
            blocks: vec![1, 1, 1],
        }
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let padding = if kernel % 2 == 1 { kernel / 2 } else { 0 };
        Ok(ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, ConvOpts::new(stride, padding))?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.a.forward_t(x, train)?.relu()?;
        let y = self.b.forward_t(&y, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

pub struct ResNet {
    stem: ConvBn,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

impl Architecture for ResNetConfig {
    fn build(&self, store: &mut ParamStore) -> Result<Box<dyn Network>> {
        let stem = ConvBn::new(store, "stem", 3, self.stem_channels, self.stem_kernel, self.stem_stride)?;
        let mut blocks = Vec::new();
        let mut c_in = self.stem_channels;
        for (stage, (&width, &count)) in self.widths.iter().zip(&self.blocks).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("layer{}.{i}", stage + 1);
                let downsample = if stride != 1 || c_in != width {
                    Some(ConvBn::new(store, &format!("{name}.downsample"), c_in, width, 1, stride)?)
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    a: ConvBn::new(store, &format!("{name}.a"), c_in, width, 3, stride)?,
                    b: ConvBn::new(store, &format!("{name}.b"), width, width, 3, 1)?,
                    downsample,
                });
                c_in = width;
            }
        }
        let head = Linear::new(store, HEAD, c_in, NUM_CLASSES, true)?;
        Ok(Box::new(ResNet { stem, blocks, head }))
    }
}

impl Network for ResNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.stem.forward_t(x, train)?.relu()?;
        x = max_pool_relu(&x, 3, 2, 1)?;
        for block in &self.blocks {
            x = block.forward_t(&x, train)?;
        }
        self.head.forward(&global_avg_pool(&x)?)
    }
}
