//! Modernized CNN: patchify stem, 7×7 depthwise conv blocks with an inverted
//! MLP, layer normalization and per-channel layer scale.

use candle_core::{Module, Result, Tensor};

use super::{Architecture, Network, HEAD, NUM_CLASSES};
use crate::layers::{global_avg_pool, Conv2d, ConvOpts, DepthwiseConv2d, LayerNorm, Linear};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNeXtConfig {
    pub stem_patch: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub kernel: usize,
    pub layer_scale: f32,
}

impl ConvNeXtConfig {
    pub fn paper() -> Self {
        ConvNeXtConfig {
            stem_patch: 4,
            dims: vec![96, 192, 384, 768],
            depths: vec![3, 3, 9, 3],
            kernel: 7,
            layer_scale: 1e-6,
        }
    }

    /// A near-zero residual branch leaves a shallow net almost linear at the start,
    /// so the tiny variant starts with full-strength branches.
    pub fn tiny() -> Self {
        ConvNeXtConfig {
            stem_patch: 8,
            dims: vec![24, 48, 96],
            depths: vec![1, 1, 2],
            kernel: 7,
            layer_scale: 1.0,
        }
    }
}

struct ConvNeXtBlock {
    dw: DepthwiseConv2d,
    norm: LayerNorm,
    pw1: Linear,
    pw2: Linear,
    gamma: Tensor,
}

impl Module for ConvNeXtBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(x)?.permute((0, 2, 3, 1))?.contiguous()?;
        let y = self.pw2.forward(&self.pw1.forward(&self.norm.forward(&y)?)?.gelu_erf()?)?;
        let y = y.broadcast_mul(&self.gamma)?.permute((0, 3, 1, 2))?;
        x + y
    }
}

struct Downsample {
    norm: LayerNorm,
    conv: Conv2d,
}

pub struct ConvNeXt {
    stem: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<(Option<Downsample>, Vec<ConvNeXtBlock>)>,
    norm: LayerNorm,
    head: Linear,
}

impl Architecture for ConvNeXtConfig {
    fn build(&self, store: &mut ParamStore) -> Result<Box<dyn Network>> {
        let d0 = self.dims[0];
        let stem = Conv2d::new(store, "stem.conv", 3, d0, self.stem_patch, ConvOpts::new(self.stem_patch, 0).with_bias())?;
        let stem_norm = LayerNorm::channels_first(store, "stem.norm", d0)?;
        let mut stages = Vec::new();
        let mut prev = d0;
        for (si, (&dim, &depth)) in self.dims.iter().zip(&self.depths).enumerate() {
            let down = if si > 0 {
                let name = format!("downsample{si}");
                Some(Downsample {
                    norm: LayerNorm::channels_first(store, &format!("{name}.norm"), prev)?,
                    conv: Conv2d::new(store, &format!("{name}.conv"), prev, dim, 2, ConvOpts::new(2, 0).with_bias())?,
                })
            } else {
                None
            };
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let name = format!("stage{}.{bi}", si + 1);
                blocks.push(ConvNeXtBlock {
                    dw: DepthwiseConv2d::new(store, &format!("{name}.dw"), dim, self.kernel, 1, true)?,
                    norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
                    pw1: Linear::new(store, &format!("{name}.pw1"), dim, 4 * dim, true)?,
                    pw2: Linear::new(store, &format!("{name}.pw2"), 4 * dim, dim, true)?,
                    gamma: store.param(&format!("{name}.gamma"), dim, Init::Const(self.layer_scale))?,
                });
            }
            stages.push((down, blocks));
            prev = dim;
        }
        let norm = LayerNorm::new(store, "norm", prev)?;
        let head = Linear::new(store, HEAD, prev, NUM_CLASSES, true)?;
        Ok(Box::new(ConvNeXt {
            stem,
            stem_norm,
            stages,
            norm,
            head,
        }))
    }
}

impl Network for ConvNeXt {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut x = self.stem_norm.forward(&self.stem.forward(x)?)?;
        for (down, blocks) in &self.stages {
            if let Some(d) = down {
                x = d.conv.forward(&d.norm.forward(&x)?)?;
            }
            for block in blocks {
                x = block.forward(&x)?;
            }
        }
        self.head.forward(&self.norm.forward(&global_avg_pool(&x)?)?)
    }
}
