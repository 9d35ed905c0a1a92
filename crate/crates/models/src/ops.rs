//! CPU kernels with hand-written gradients for the hot spots of small networks:
//! patch extraction (im2col), depthwise convolution and normalization layers.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

fn contiguous_f32<'a>(storage: &'a CpuStorage, layout: &Layout, op: &str) -> Result<&'a [f32]> {
    let data = match storage {
        CpuStorage::F32(v) => v.as_slice(),
        _ => bail!("{op}: only f32 is supported"),
    };
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("{op}: input must be contiguous"),
    }
}

/// Sliding-window geometry with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Window { kernel, stride, pad }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `o` with `o * stride + tap - pad` inside `0..len`, and the input index of the first.
    fn valid(&self, tap: usize, len: usize, out: usize) -> (usize, usize) {
        let first = if tap >= self.pad { 0 } else { (self.pad - tap).div_ceil(self.stride) };
        let end = if len + self.pad > tap {
            ((len + self.pad - tap - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (first, end.max(first))
    }
}

/// `(B, C, H, W)` → `(B, C·k·k, Ho·Wo)`; row `c·k² + i·k + j` holds tap `(i, j)` of channel `c`.
#[derive(Debug, Clone, Copy)]
struct Unfold(Window);

/// Adjoint of [`Unfold`]: scatters columns back onto a `(B, C, H, W)` grid, summing overlaps.
#[derive(Debug, Clone, Copy)]
struct Fold {
    win: Window,
    channels: usize,
    height: usize,
    width: usize,
}

/// Visits every (input row, output row) pair of the unfolded layout:
/// `f(src_offset, dst_offset, ox_range)` with `src_offset` the start of the input
/// row and `dst_offset` the start of the output row of the column matrix.
fn for_each_patch_row(
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let k = win.kernel;
    let (ho, wo) = (win.out_len(h), win.out_len(w));
    let rows = c * k * k;
    for n in 0..b {
        for ch in 0..c {
            for i in 0..k {
                let (oy0, oy1) = win.valid(i, h, ho);
                for j in 0..k {
                    let (ox0, ox1) = win.valid(j, w, wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    let row = ch * k * k + i * k + j;
                    for oy in oy0..oy1 {
                        let iy = oy * win.stride + i - win.pad;
                        f(((n * c + ch) * h + iy) * w, (n * rows + row) * ho * wo + oy * wo, ox0, ox1, j);
                    }
                }
            }
        }
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = contiguous_f32(storage, layout, self.name())?;
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let win = self.0;
        if h + 2 * win.pad < win.kernel || w + 2 * win.pad < win.kernel {
            bail!("unfold: kernel {} larger than padded input {h}x{w}", win.kernel);
        }
        let (ho, wo) = (win.out_len(h), win.out_len(w));
        let kk = win.kernel * win.kernel;
        let mut dst = vec![0f32; b * c * kk * ho * wo];
        let (s, p) = (win.stride, win.pad);
        for_each_patch_row(dims, win, |src_row, dst_row, ox0, ox1, j| {
            axpy_strided(&mut dst[dst_row + ox0..], &src[src_row + ox0 * s + j - p..], 1.0, ox1 - ox0, s);
        });
        Ok((CpuStorage::F32(dst), Shape::from((b, c * kk, ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let fold = Fold {
            win: self.0,
            channels: c,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = contiguous_f32(storage, layout, self.name())?;
        let (b, _, _) = layout.shape().dims3()?;
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut dst = vec![0f32; b * c * h * w];
        let (s, p) = (self.win.stride, self.win.pad);
        for_each_patch_row((b, c, h, w), self.win, |dst_row, src_row, ox0, ox1, j| {
            axpy_scatter(&mut dst[dst_row + ox0 * s + j - p..], &src[src_row + ox0..], 1.0, ox1 - ox0, s);
        });
        Ok((CpuStorage::F32(dst), Shape::from((b, c, h, w))))
    }
}

/// Patch extraction for convolution as a matrix product; differentiable.
pub fn unfold(x: &Tensor, win: Window) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Unfold(win))
}

/// Per-channel convolution: `x` is `(B, C, H, W)`, the weight `(C, k·k)`.
#[derive(Debug, Clone, Copy)]
struct Depthwise(Window);

#[derive(Debug, Clone, Copy)]
struct DepthwiseGradInput {
    win: Window,
    height: usize,
    width: usize,
}

#[derive(Debug, Clone, Copy)]
struct DepthwiseGradWeight(Window);

/// `dst[t] += w * src[t * stride]` for `t < n`.
#[inline]
fn axpy_strided(dst: &mut [f32], src: &[f32], w: f32, n: usize, stride: usize) {
    if stride == 1 {
        for (d, &v) in dst[..n].iter_mut().zip(&src[..n]) {
            *d += w * v;
        }
    } else {
        for (t, d) in dst[..n].iter_mut().enumerate() {
            *d += w * src[t * stride];
        }
    }
}

/// Transpose of [`axpy_strided`]: `dst[t * stride] += w * src[t]` for `t < n`.
#[inline]
fn axpy_scatter(dst: &mut [f32], src: &[f32], w: f32, n: usize, stride: usize) {
    if stride == 1 {
        for (d, &v) in dst[..n].iter_mut().zip(&src[..n]) {
            *d += w * v;
        }
    } else {
        for (t, &v) in src[..n].iter().enumerate() {
            dst[t * stride] += w * v;
        }
    }
}

/// Calls `f(channel, out_row, out_col_range, in_row, in_col_offset, tap)` for every
/// valid (output, tap) pair of a depthwise window, grouped by output row.
fn for_each_tap(c: usize, h: usize, w: usize, win: Window, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let k = win.kernel;
    let (ho, wo) = (win.out_len(h), win.out_len(w));
    for ch in 0..c {
        for i in 0..k {
            let (oy0, oy1) = win.valid(i, h, ho);
            for j in 0..k {
                let (ox0, ox1) = win.valid(j, w, wo);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * win.stride + i - win.pad;
                    f(ch, oy, ox0, ox1, iy, i * k + j);
                }
            }
        }
    }
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, self.name())?;
        let wt = contiguous_f32(s2, l2, self.name())?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let win = self.0;
        let kk = win.kernel * win.kernel;
        if l2.shape().dims() != [c, kk] {
            bail!("depthwise: weight shape {:?}, expected [{c}, {kk}]", l2.shape().dims());
        }
        let (ho, wo) = (win.out_len(h), win.out_len(w));
        let mut out = vec![0f32; b * c * ho * wo];
        let s = win.stride;
        for n in 0..b {
            for_each_tap(c, h, w, win, |ch, oy, ox0, ox1, iy, tap| {
                let wv = wt[ch * kk + tap];
                let j = tap % win.kernel;
                let src = &x[((n * c + ch) * h + iy) * w..][..w];
                let dst = &mut out[((n * c + ch) * ho + oy) * wo..][..wo];
                axpy_strided(&mut dst[ox0..], &src[ox0 * s + j - win.pad..], wv, ox1 - ox0, s);
            });
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, weight: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, w) = x.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(
            weight,
            &DepthwiseGradInput {
                win: self.0,
                height: h,
                width: w,
            },
        )?;
        let gw = x.apply_op2_no_bwd(&grad, &DepthwiseGradWeight(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseGradInput {
    fn name(&self) -> &'static str {
        "depthwise-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = contiguous_f32(s1, l1, self.name())?;
        let wt = contiguous_f32(s2, l2, self.name())?;
        let (b, c, ho, wo) = l1.shape().dims4()?;
        let (h, w, win) = (self.height, self.width, self.win);
        let kk = win.kernel * win.kernel;
        let s = win.stride;
        let mut gx = vec![0f32; b * c * h * w];
        for n in 0..b {
            for_each_tap(c, h, w, win, |ch, oy, ox0, ox1, iy, tap| {
                let wv = wt[ch * kk + tap];
                let j = tap % win.kernel;
                let src = &g[((n * c + ch) * ho + oy) * wo..][..wo];
                let dst = &mut gx[((n * c + ch) * h + iy) * w..][..w];
                axpy_scatter(&mut dst[ox0 * s + j - win.pad..], &src[ox0..], wv, ox1 - ox0, s);
            });
        }
        Ok((CpuStorage::F32(gx), Shape::from((b, c, h, w))))
    }
}

impl CustomOp2 for DepthwiseGradWeight {
    fn name(&self) -> &'static str {
        "depthwise-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, self.name())?;
        let g = contiguous_f32(s2, l2, self.name())?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let (_, _, ho, wo) = l2.shape().dims4()?;
        let win = self.0;
        let kk = win.kernel * win.kernel;
        let s = win.stride;
        let mut gw = vec![0f32; c * kk];
        for n in 0..b {
            for_each_tap(c, h, w, win, |ch, oy, ox0, ox1, iy, tap| {
                let j = tap % win.kernel;
                let src = &x[((n * c + ch) * h + iy) * w..][..w];
                let gr = &g[((n * c + ch) * ho + oy) * wo..][..wo];
                let src = &src[ox0 * s + j - win.pad..];
                let acc: f32 = if s == 1 {
                    gr[ox0..ox1].iter().zip(src).map(|(a, b)| a * b).sum()
                } else {
                    gr[ox0..ox1].iter().zip(src.iter().step_by(s)).map(|(a, b)| a * b).sum()
                };
                gw[ch * kk + tap] += acc;
            });
        }
        Ok((CpuStorage::F32(gw), Shape::from((c, kk))))
    }
}

/// Depthwise convolution of `(B, C, H, W)` with a `(C, k·k)` weight; differentiable in both.
pub fn depthwise_conv(x: &Tensor, weight: &Tensor, win: Window) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise(win))
}

/// Normalization statistics of one group of values: `(mean, 1 / sqrt(var + eps))`
/// with the biased variance.
fn moments(values: impl Iterator<Item = f32> + Clone, count: usize, eps: f64) -> (f32, f32) {
    let mean = values.clone().map(f64::from).sum::<f64>() / count as f64;
    let var = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>() / count as f64;
    (mean as f32, (1.0 / (var + eps).sqrt()) as f32)
}

/// Batch normalization with batch statistics over `(B, H, W)`; inputs `(x, gamma, beta)`.
#[derive(Debug, Clone, Copy)]
struct BatchNormTrain {
    eps: f64,
}

/// Gradient of [`BatchNormTrain`]; inputs `(x, gamma, grad_out)`, output the
/// concatenation `[grad_x, grad_gamma, grad_beta]`.
#[derive(Debug, Clone, Copy)]
struct BatchNormTrainGrad {
    eps: f64,
}

fn channel_values(x: &[f32], (b, c, hw): (usize, usize, usize), ch: usize) -> impl Iterator<Item = f32> + Clone + '_ {
    (0..b).flat_map(move |n| x[(n * c + ch) * hw..][..hw].iter().copied())
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, self.name())?;
        let gamma = contiguous_f32(s2, l2, self.name())?;
        let beta = contiguous_f32(s3, l3, self.name())?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let mut y = vec![0f32; x.len()];
        for ch in 0..c {
            let (mean, inv) = moments(channel_values(x, (b, c, hw), ch), b * hw, self.eps);
            let (scale, shift) = (gamma[ch] * inv, beta[ch] - mean * gamma[ch] * inv);
            for n in 0..b {
                let off = (n * c + ch) * hw;
                for (o, &v) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = v * scale + shift;
                }
            }
        }
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.elem_count();
        let n = x.elem_count();
        let all = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &BatchNormTrainGrad { eps: self.eps })?;
        Ok((
            Some(all.narrow(0, 0, n)?.reshape(x.shape())?),
            Some(all.narrow(0, n, c)?),
            Some(all.narrow(0, n + c, c)?),
        ))
    }
}

impl CustomOp3 for BatchNormTrainGrad {
    fn name(&self) -> &'static str {
        "batch-norm-train-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, self.name())?;
        let gamma = contiguous_f32(s2, l2, self.name())?;
        let g = contiguous_f32(s3, l3, self.name())?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let m = (b * hw) as f32;
        let mut out = vec![0f32; x.len() + 2 * c];
        for ch in 0..c {
            let (mean, inv) = moments(channel_values(x, (b, c, hw), ch), b * hw, self.eps);
            let (mut sum_g, mut sum_gx) = (0f64, 0f64);
            for n in 0..b {
                let off = (n * c + ch) * hw;
                for (&gv, &xv) in g[off..off + hw].iter().zip(&x[off..off + hw]) {
                    sum_g += f64::from(gv);
                    sum_gx += f64::from(gv * (xv - mean) * inv);
                }
            }
            let (sum_g, sum_gx) = (sum_g as f32, sum_gx as f32);
            let k = gamma[ch] * inv / m;
            for n in 0..b {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mean) * inv;
                    out[i] = k * (m * g[i] - sum_g - xhat * sum_gx);
                }
            }
            out[x.len() + ch] = sum_gx;
            out[x.len() + c + ch] = sum_g;
        }
        Ok((CpuStorage::F32(out), Shape::from(x.len() + 2 * c)))
    }
}

/// Batch-statistics normalization of `(B, C, H, W)` followed by a per-channel affine map.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

/// Per-channel `(mean, unbiased variance)` of `(B, C, H, W)` as a `(2, C)` tensor; not differentiable.
pub fn channel_moments(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1_no_bwd(&ChannelMoments)
}

struct ChannelMoments;

impl CustomOp1 for ChannelMoments {
    fn name(&self) -> &'static str {
        "channel-moments"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(storage, layout, self.name())?;
        let (b, c, h, w) = layout.shape().dims4()?;
        let m = b * h * w;
        let mut out = vec![0f32; 2 * c];
        for ch in 0..c {
            let values = channel_values(x, (b, c, h * w), ch);
            let mean = values.clone().map(f64::from).sum::<f64>() / m as f64;
            let ss = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>();
            out[ch] = mean as f32;
            out[c + ch] = (ss / (m.max(2) - 1) as f64) as f32;
        }
        Ok((CpuStorage::F32(out), Shape::from((2, c))))
    }
}

/// Layer normalization over the last dimension; inputs `(x, gamma, beta)`.
#[derive(Debug, Clone, Copy)]
struct LayerNormLast {
    eps: f64,
}

/// Gradient of [`LayerNormLast`]; inputs `(x, gamma, grad_out)`, output
/// `[grad_x, grad_gamma, grad_beta]` concatenated.
#[derive(Debug, Clone, Copy)]
struct LayerNormLastGrad {
    eps: f64,
}

impl CustomOp3 for LayerNormLast {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, self.name())?;
        let gamma = contiguous_f32(s2, l2, self.name())?;
        let beta = contiguous_f32(s3, l3, self.name())?;
        let d = gamma.len();
        let mut y = vec![0f32; x.len()];
        for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let (mean, inv) = moments(row.iter().copied(), d, self.eps);
            for i in 0..d {
                out[i] = (row[i] - mean) * inv * gamma[i] + beta[i];
            }
        }
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = gamma.elem_count();
        let n = x.elem_count();
        let all = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &LayerNormLastGrad { eps: self.eps })?;
        Ok((
            Some(all.narrow(0, 0, n)?.reshape(x.shape())?),
            Some(all.narrow(0, n, d)?),
            Some(all.narrow(0, n + d, d)?),
        ))
    }
}

impl CustomOp3 for LayerNormLastGrad {
    fn name(&self) -> &'static str {
        "layer-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, self.name())?;
        let gamma = contiguous_f32(s2, l2, self.name())?;
        let g = contiguous_f32(s3, l3, self.name())?;
        let d = gamma.len();
        let n = x.len();
        let mut out = vec![0f32; n + 2 * d];
        let mut xhat = vec![0f32; d];
        for (r, (row, grow)) in x.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
            let (mean, inv) = moments(row.iter().copied(), d, self.eps);
            let (mut sum_gh, mut sum_ghx) = (0f32, 0f32);
            for i in 0..d {
                xhat[i] = (row[i] - mean) * inv;
                let gh = grow[i] * gamma[i];
                sum_gh += gh;
                sum_ghx += gh * xhat[i];
                out[n + i] += grow[i] * xhat[i];
                out[n + d + i] += grow[i];
            }
            let k = inv / d as f32;
            for i in 0..d {
                out[r * d + i] = k * (d as f32 * grow[i] * gamma[i] - sum_gh - xhat[i] * sum_ghx);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from(n + 2 * d)))
    }
}

/// Layer normalization over the last dimension followed by a per-feature affine map.
pub fn layer_norm_last(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormLast { eps })
}
