//! Minimal layer set. Every op has a gradient and every parameter comes from
//! [`ParamStore`].

use candle_core::{Module, Result, Tensor, Var, D};

use crate::ops::{batch_norm_train, channel_moments, depthwise_conv, layer_norm_last, unfold, Window};
use crate::params::{Init, ParamStore};

fn fan_in_bound(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f32).sqrt())
}

/// He-uniform bound for layers followed by a rectifier.
fn he_bound(fan_in: usize) -> Init {
    Init::Uniform((6.0 / fan_in as f32).sqrt())
}

/// Dense 2-D convolution computed as patch extraction followed by a matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(C_out, C_in, k, k)`.
    weight: Tensor,
    bias: Option<Tensor>,
    window: Window,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvOpts {
            stride,
            padding,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, opts: ConvOpts) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.param(&format!("{name}.weight"), (c_out, c_in, kernel, kernel), he_bound(fan_in))?;
        let bias = if opts.bias {
            Some(store.param(&format!("{name}.bias"), c_out, fan_in_bound(fan_in))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            window: Window::new(kernel, opts.stride.max(1), opts.padding),
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (ho, wo) = (self.window.out_len(h), self.window.out_len(w));
        let c_out = self.weight.dim(0)?;
        let cols = unfold(x, self.window)?;
        let depth = cols.dim(1)?;
        let y = self
            .weight
            .reshape((c_out, depth))?
            .broadcast_matmul(&cols)?
            .reshape((b, c_out, ho, wo))?;
        match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Depthwise convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    /// `(C, k*k)` taps.
    weight: Tensor,
    bias: Option<Tensor>,
    window: Window,
}

impl DepthwiseConv2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let fan_in = kernel * kernel;
        let weight = store.param(&format!("{name}.weight"), (channels, kernel * kernel), he_bound(fan_in))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), channels, fan_in_bound(fan_in))?)
        } else {
            None
        };
        Ok(DepthwiseConv2d {
            weight,
            bias,
            window: Window::new(kernel, stride, kernel / 2),
        })
    }
}

impl Module for DepthwiseConv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = depthwise_conv(x, &self.weight, self.window)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, bias, fan_in_bound(d_in))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), (d_out, d_in), init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), d_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }
}

impl Module for Linear {
    /// Applies to the last dimension of an input of any rank.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.weight.dim(0)?;
        y.reshape(out_dims)
    }
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: store.param(&format!("{name}.weight"), channels, Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), channels, Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), channels, Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), channels, Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        if train {
            let stats = channel_moments(x)?;
            let m = self.momentum;
            let mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (stats.get(0)? * m)?)?;
            let var = ((self.running_var.as_tensor() * (1.0 - m))? + (stats.get(1)? * m)?)?;
            self.running_mean.set(&mean)?;
            self.running_var.set(&var)?;
            return batch_norm_train(x, &self.weight, &self.bias, self.eps);
        }
        let inv_std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = (&self.weight * &inv_std)?;
        let shift = (&self.bias - (self.running_mean.as_tensor() * &scale)?)?;
        x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)
    }
}

/// Layer normalization over one dimension (last for token layouts, 1 for `NCHW`).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
    channels_first: bool,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: store.param(&format!("{name}.weight"), dim, Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), dim, Init::Zeros)?,
            eps: 1e-6,
            channels_first: false,
        })
    }

    /// Normalizes over the channel axis of an `NCHW` tensor.
    pub fn channels_first(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            channels_first: true,
            ..Self::new(store, name, dim)?
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.channels_first {
            let y = layer_norm_last(&x.permute((0, 2, 3, 1))?, &self.weight, &self.bias, self.eps)?;
            y.permute((0, 3, 1, 2))?.contiguous()
        } else {
            layer_norm_last(x, &self.weight, &self.bias, self.eps)
        }
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// `(N, C, H, W)` → `(N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

/// Max pooling with zero padding; only valid on non-negative inputs (after ReLU).
pub fn max_pool_relu(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let window = Window::new(kernel, stride, padding);
    let (ho, wo) = (window.out_len(h), window.out_len(w));
    unfold(x, window)?
        .reshape((b, c, kernel * kernel, ho * wo))?
        .max(2)?
        .reshape((b, c, ho, wo))
}
