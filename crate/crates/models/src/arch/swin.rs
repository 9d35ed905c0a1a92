//! Hierarchical transformer with self-attention restricted to local windows.
//! Alternate blocks shift the window grid by half a window so information flows
//! across window borders; patch merging halves the resolution between stages.

use candle_core::{Device, Module, Result, Tensor, D};

use super::{Architecture, Network, HEAD, NUM_CLASSES};
use crate::layers::{Conv2d, ConvOpts, LayerNorm, Linear};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
}

impl SwinConfig {
    pub fn paper() -> Self {
        SwinConfig {
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4,
            image_size: 224,
        }
    }

    pub fn tiny() -> Self {
        SwinConfig {
            patch_size: 16,
            embed_dim: 48,
            depths: vec![2, 2],
            heads: vec![3, 6],
            window: 7,
            mlp_ratio: 4,
            image_size: 224,
        }
    }
}

/// For each (query, key) pair inside a window, the row of the relative bias table.
fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            let dy = (q / window) as isize - (k / window) as isize + window as isize - 1;
            let dx = (q % window) as isize - (k % window) as isize + window as isize - 1;
            idx.push((dy * (2 * window as isize - 1) + dx) as u32);
        }
    }
    idx
}

/// `(num_windows, N, N)` additive mask: −100 between tokens that came from
/// different regions before the cyclic shift.
fn shift_mask(res: usize, window: usize, shift: usize, device: &Device) -> Result<Tensor> {
    let region = |i: usize| {
        if i < res - window {
            0
        } else if i < res - shift {
            1
        } else {
            2
        }
    };
    let n = window * window;
    let per_side = res / window;
    let mut mask = Vec::with_capacity(per_side * per_side * n * n);
    for wy in 0..per_side {
        for wx in 0..per_side {
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * window + t / window, wx * window + t % window);
                    region(y) * 3 + region(x)
                })
                .collect();
            for a in &ids {
                for b in &ids {
                    mask.push(if a == b { 0f32 } else { -100.0 });
                }
            }
        }
    }
    Tensor::from_vec(mask, (per_side * per_side, n, n), device)
}

/// `(B, H, W, C)` → `(B * nW, window², C)`.
fn partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))
}

fn unpartition(x: &Tensor, window: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    x.reshape((b, h / window, w / window, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))
}

struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let table = (2 * window - 1) * (2 * window - 1);
        let index = relative_position_index(window);
        let n = index.len();
        Ok(WindowAttention {
            qkv: Linear::with_init(store, &format!("{name}.qkv"), dim, 3 * dim, true, Init::TruncNormal(0.02))?,
            proj: Linear::with_init(store, &format!("{name}.proj"), dim, dim, true, Init::TruncNormal(0.02))?,
            bias_table: store.param(&format!("{name}.relative_bias"), (table, heads), Init::TruncNormal(0.02))?,
            bias_index: Tensor::from_vec(index, n, store.device())?,
            heads,
            window,
        })
    }

    /// `x`: `(B * nW, N, C)`; `mask`: optional `(nW, N, N)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?)?;
        let nn = self.window * self.window;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((nn, nn, self.heads))?
            .permute((2, 0, 1))?;
        attn = attn.broadcast_add(&bias.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.proj.forward(&out)
    }
}

struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::with_init(store, &format!("{name}.fc1"), dim, hidden, true, Init::TruncNormal(0.02))?,
            fc2: Linear::with_init(store, &format!("{name}.fc2"), hidden, dim, true, Init::TruncNormal(0.02))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let mut y = self.norm1.forward(x)?;
        let s = self.shift as i32;
        if self.shift > 0 {
            y = y.roll(-s, 1)?.roll(-s, 2)?;
        }
        let windows = self.attn.forward(&partition(&y, self.window)?, self.mask.as_ref())?;
        let mut y = unpartition(&windows, self.window, b, h, w)?;
        if self.shift > 0 {
            y = y.roll(s, 1)?.roll(s, 2)?;
        }
        let x = (x + y)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl Module for PatchMerging {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        // Concatenate each 2×2 neighbourhood as (row0,col0), (row1,col0), (row0,col1), (row1,col1).
        let merged = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

pub struct Swin {
    patch_embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<(Vec<SwinBlock>, Option<PatchMerging>)>,
    norm: LayerNorm,
    head: Linear,
}

impl Architecture for SwinConfig {
    fn build(&self, store: &mut ParamStore) -> Result<Box<dyn Network>> {
        let dim0 = self.embed_dim;
        let patch_embed = Conv2d::new(
            store,
            "patch_embed.proj",
            3,
            dim0,
            self.patch_size,
            ConvOpts::new(self.patch_size, 0).with_bias(),
        )?;
        let embed_norm = LayerNorm::new(store, "patch_embed.norm", dim0)?;
        let mut res = self.image_size / self.patch_size;
        let mut dim = dim0;
        let mut stages = Vec::new();
        for (si, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            let window = self.window.min(res);
            if res % window != 0 {
                candle_core::bail!("resolution {res} is not a multiple of window {window}");
            }
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let name = format!("stage{}.{bi}", si + 1);
                let shift = if bi % 2 == 1 && window < res { window / 2 } else { 0 };
                let mask = if shift > 0 {
                    Some(shift_mask(res, window, shift, store.device())?)
                } else {
                    None
                };
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
                    attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, window)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
                    mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * self.mlp_ratio)?,
                    window,
                    shift,
                    mask,
                });
            }
            let merge = if si + 1 < self.depths.len() {
                let name = format!("stage{}.merge", si + 1);
                let m = PatchMerging {
                    norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim)?,
                    reduction: Linear::with_init(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, Init::TruncNormal(0.02))?,
                };
                dim *= 2;
                res /= 2;
                Some(m)
            } else {
                None
            };
            stages.push((blocks, merge));
        }
        let norm = LayerNorm::new(store, "norm", dim)?;
        let head = Linear::new(store, HEAD, dim, NUM_CLASSES, true)?;
        Ok(Box::new(Swin {
            patch_embed,
            embed_norm,
            stages,
            norm,
            head,
        }))
    }
}

impl Network for Swin {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let x = self.patch_embed.forward(x)?.permute((0, 2, 3, 1))?.contiguous()?;
        let mut x = self.embed_norm.forward(&x)?;
        for (blocks, merge) in &self.stages {
            for block in blocks {
                x = block.forward(&x)?;
            }
            if let Some(m) = merge {
                x = m.forward(&x)?;
            }
        }
        let pooled = self.norm.forward(&x)?.mean(1)?.mean(1)?;
        self.head.forward(&pooled)
    }
}
