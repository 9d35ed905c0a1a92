//! The five backbone families. Each is defined by a config with a `paper()` and a
//! `tiny()` instance; every variant ends in global pooling and a single affine
//! layer named `head` producing two logits.

use candle_core::{Result, Tensor};

use crate::params::ParamStore;

pub mod convnext;
pub mod densenet;
pub mod efficientnet;
pub mod resnet;
pub mod swin;

/// Name prefix of the classification head; excluded when loading pretrained weights.
pub const HEAD: &str = "head";

pub const NUM_CLASSES: usize = 2;

/// A built network. `train` switches batch statistics on (and updates their running
/// averages); with `train == false` the forward pass is a pure function of the input.
pub trait Network: Send + Sync {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor>;
}

/// Architecture configs implement this to allocate their parameters in `store`.
pub trait Architecture {
    fn build(&self, store: &mut ParamStore) -> Result<Box<dyn Network>>;
}
