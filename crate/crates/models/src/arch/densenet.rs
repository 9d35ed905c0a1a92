//! Densely connected CNN: every layer in a block sees the concatenation of all
//! earlier feature maps in that block.

use candle_core::{Module, Result, Tensor};

use super::{Architecture, Network, HEAD, NUM_CLASSES};
use crate::layers::{global_avg_pool, max_pool_relu, BatchNorm2d, Conv2d, ConvOpts, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub growth: usize,
    /// Bottleneck width as a multiple of `growth`.
    pub bn_size: usize,
    pub blocks: Vec<usize>,
}

impl DenseNetConfig {
    /// 121-layer layout.
    pub fn paper() -> Self {
        DenseNetConfig {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            growth: 32,
            bn_size: 4,
            blocks: vec![6, 12, 24, 16],
        }
    }

    pub fn tiny() -> Self {
        DenseNetConfig {
            stem_channels: 16,
            stem_kernel: 4,
            stem_stride: 4,
            growth: 8,
            bn_size: 2,
            blocks: vec![3, 3, 3],
        }
    }
}

struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(&self.bn1.forward_t(x, train)?.relu()?)?;
        self.conv2.forward(&self.bn2.forward_t(&y, train)?.relu()?)
    }
}

struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

struct DenseBlock {
    layers: Vec<DenseLayer>,
    transition: Option<Transition>,
}

impl DenseBlock {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut features = vec![x.clone()];
        for layer in &self.layers {
            let input = Tensor::cat(&features, 1)?;
            features.push(layer.forward_t(&input, train)?);
        }
        let x = Tensor::cat(&features, 1)?;
        match &self.transition {
            Some(t) => t.conv.forward(&t.bn.forward_t(&x, train)?.relu()?)?.avg_pool2d(2),
            None => Ok(x),
        }
    }
}

pub struct DenseNet {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<DenseBlock>,
    final_bn: BatchNorm2d,
    head: Linear,
}

impl Architecture for DenseNetConfig {
    fn build(&self, store: &mut ParamStore) -> Result<Box<dyn Network>> {
        let stem_pad = if self.stem_kernel % 2 == 1 { self.stem_kernel / 2 } else { 0 };
        let stem_conv = Conv2d::new(
            store,
            "stem.conv",
            3,
            self.stem_channels,
            self.stem_kernel,
            ConvOpts::new(self.stem_stride, stem_pad),
        )?;
        let stem_bn = BatchNorm2d::new(store, "stem.bn", self.stem_channels)?;
        let mut channels = self.stem_channels;
        let mut blocks = Vec::new();
        for (b, &count) in self.blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..count {
                let name = format!("block{}.layer{l}", b + 1);
                let mid = self.bn_size * self.growth;
                layers.push(DenseLayer {
                    bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), channels)?,
                    conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, mid, 1, ConvOpts::default())?,
                    bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), mid)?,
                    conv2: Conv2d::new(store, &format!("{name}.conv2"), mid, self.growth, 3, ConvOpts::new(1, 1))?,
                });
                channels += self.growth;
            }
            let transition = if b + 1 < self.blocks.len() {
                let name = format!("transition{}", b + 1);
                let out = channels / 2;
                let t = Transition {
                    bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels)?,
                    conv: Conv2d::new(store, &format!("{name}.conv"), channels, out, 1, ConvOpts::default())?,
                };
                channels = out;
                Some(t)
            } else {
                None
            };
            blocks.push(DenseBlock { layers, transition });
        }
        let final_bn = BatchNorm2d::new(store, "final.bn", channels)?;
        let head = Linear::new(store, HEAD, channels, NUM_CLASSES, true)?;
        Ok(Box::new(DenseNet {
            stem_conv,
            stem_bn,
            blocks,
            final_bn,
            head,
        }))
    }
}

impl Network for DenseNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.stem_bn.forward_t(&self.stem_conv.forward(x)?, train)?.relu()?;
        let mut x = max_pool_relu(&x, 3, 2, 1)?;
        for block in &self.blocks {
            x = block.forward_t(&x, train)?;
        }
        let x = self.final_bn.forward_t(&x, train)?.relu()?;
        self.head.forward(&global_avg_pool(&x)?)
    }
}
