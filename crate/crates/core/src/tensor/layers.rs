use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Frozen (inference-mode) batch normalization statistics and affine terms,
/// one entry per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    /// Pass-through normalization: mean 0, var 1, gamma 1, beta 0, eps 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::dim("batch-norm parameter lengths differ"));
        }
        if self.eps < 0.0 || self.var.iter().any(|&v| v + self.eps <= 0.0) {
            return Err(Error::dim("batch-norm variance must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.var[c] + self.eps).sqrt()
    }
}

/// Normalized, affine-transformed pre-activation for channel `c`.
///
/// Every code path that evaluates a conv block (forward pass, edit objective,
/// gradients) goes through this function so the results agree bit for bit.
#[inline]
pub fn bn_apply(bn: &BatchNorm, c: usize, y: f64) -> f64 {
    bn.gamma[c] * ((y - bn.mean[c]) * bn.inv_std(c)) + bn.beta[c]
}

/// Convolution followed by frozen batch-norm and ReLU. When `skip_from` is
/// set, the input of layer `skip_from` is added to the post-ReLU output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub bn: BatchNorm,
    pub stride: usize,
    pub pad: usize,
    pub skip_from: Option<usize>,
}

impl ConvBlock {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Length of an unfolded receptive field, `in_channels * kh * kw`.
    pub fn key_dim(&self) -> usize {
        let s = self.weight.shape();
        s[1] * s[2] * s[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.ndim() != 4 {
            return Err(Error::dim("conv weight must be 4-D"));
        }
        let m = self.out_channels();
        if self.bias.len() != m || self.bn.channels() != m {
            return Err(Error::dim("conv bias/bn length must equal out_channels"));
        }
        if self.stride == 0 {
            return Err(Error::dim("conv stride must be >= 1"));
        }
        self.bn.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub mode: PoolMode,
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvBnRelu,
    ConvBnReluSkip,
    Pool,
    Dense,
    Flatten,
}

/// One layer of a network together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerParams {
    Conv(ConvBlock),
    Pool(Pool),
    Dense(Dense),
    Flatten,
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Conv(c) if c.skip_from.is_some() => LayerKind::ConvBnReluSkip,
            LayerParams::Conv(_) => LayerKind::ConvBnRelu,
            LayerParams::Pool(_) => LayerKind::Pool,
            LayerParams::Dense(_) => LayerKind::Dense,
            LayerParams::Flatten => LayerKind::Flatten,
        }
    }

    pub fn as_conv(&self) -> Option<&ConvBlock> {
        match self {
            LayerParams::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut ConvBlock> {
        match self {
            LayerParams::Conv(c) => Some(c),
            _ => None,
        }
    }

    /// Forward pass without any skip addition. The returned cache is what
    /// [`vjp`] expects.
    pub fn forward(&self, x: &Tensor) -> Result<LayerCache> {
        match self {
            LayerParams::Conv(c) => {
                let pre = conv2d(x, c)?;
                let output = bn_relu(&pre, &c.bn)?;
                Ok(LayerCache { input: x.clone(), pre_activation: Some(pre), output })
            }
            LayerParams::Pool(p) => {
                Ok(LayerCache { input: x.clone(), pre_activation: None, output: pool2d(x, p.mode, p.size, p.stride)? })
            }
            LayerParams::Dense(d) => {
                Ok(LayerCache { input: x.clone(), pre_activation: None, output: dense(x, &d.weight, &d.bias)? })
            }
            LayerParams::Flatten => {
                Ok(LayerCache { input: x.clone(), pre_activation: None, output: x.reshape(&[x.len()])? })
            }
        }
    }
}

/// Activations recorded by [`LayerParams::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub input: Tensor,
    /// Conv output before batch-norm; `None` for other layers.
    pub pre_activation: Option<Tensor>,
    pub output: Tensor,
}

/// Parameter gradients produced by [`vjp`].
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Conv { weight: Tensor, bias: Vec<f64>, gamma: Vec<f64>, beta: Vec<f64> },
    Dense { weight: Tensor, bias: Vec<f64> },
    None,
}

/// Output spatial extent of a sliding window.
pub fn output_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::dim("stride must be >= 1"));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if kh > ph || kw > pw || kh == 0 || kw == 0 {
        return Err(Error::dim(format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}")));
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

/// im2col layout: `[c*kh*kw, locations]`, zero padded.
fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = output_hw(h, w, kh, kw, stride, pad)?;
    let locs = oh * ow;
    let xd = x.data();
    let mut col = vec![0.0; c * kh * kw * locs];
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                let dst = &mut col[row * locs..(row + 1) * locs];
                for i in 0..oh {
                    let r = (i * stride + a) as isize - pad as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    let src = &xd[(ci * h + r as usize) * w..(ci * h + r as usize + 1) * w];
                    for j in 0..ow {
                        let q = (j * stride + b) as isize - pad as isize;
                        if q >= 0 && q < w as isize {
                            dst[i * ow + j] = src[q as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((col, oh, ow))
}

/// Inverse scatter of [`im2col`]: accumulates columns back onto the input grid.
fn col2im(
    col: &[f64],
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (c, h, w) = shape;
    let locs = oh * ow;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                let srcrow = &col[row * locs..(row + 1) * locs];
                for i in 0..oh {
                    let r = (i * stride + a) as isize - pad as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    let base = (ci * h + r as usize) * w;
                    for j in 0..ow {
                        let q = (j * stride + b) as isize - pad as isize;
                        if q >= 0 && q < w as isize {
                            out[base + q as usize] += srcrow[i * ow + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Receptive fields of every output location, one per row:
/// `[oh*ow, c*kh*kw]`, row `i*ow + j` feeding output `(i, j)`.
pub fn unfold(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (col, oh, ow) = im2col(x, kh, kw, stride, pad)?;
    let n = col.len() / (oh * ow);
    Tensor::from_parts(vec![n, oh * ow], col).transpose2()
}

/// Convolution (pre-normalization output) as the weight matrix applied to
/// the unfolded input, plus bias. Returns `[out_channels, oh, ow]`.
pub fn conv2d(x: &Tensor, p: &ConvBlock) -> Result<Tensor> {
    let (c, _, _) = x.chw()?;
    if p.weight.ndim() != 4 || c != p.in_channels() {
        return Err(Error::dim(format!(
            "conv expects {} input channels, got {c}",
            p.weight.shape().get(1).copied().unwrap_or(0)
        )));
    }
    if p.bias.len() != p.out_channels() {
        return Err(Error::dim("conv bias length must equal out_channels"));
    }
    let (kh, kw) = p.kernel();
    let (col, oh, ow) = im2col(x, kh, kw, p.stride, p.pad)?;
    let locs = oh * ow;
    let n = p.key_dim();
    let m = p.out_channels();
    let wd = p.weight.data();
    let mut out = vec![0.0; m * locs];
    // Accumulate over the key index in order for every location; the
    // per-location sum is the same sequence of adds as a plain dot product.
    for o in 0..m {
        let acc = &mut out[o * locs..(o + 1) * locs];
        for k in 0..n {
            let wv = wd[o * n + k];
            let crow = &col[k * locs..(k + 1) * locs];
            for (a, &cv) in acc.iter_mut().zip(crow) {
                *a += wv * cv;
            }
        }
        let b = p.bias[o];
        for a in acc.iter_mut() {
            *a += b;
        }
    }
    Ok(Tensor::from_parts(vec![m, oh, ow], out))
}

/// `max(0, gamma * (y - mean) / sqrt(var + eps) + beta)` per channel.
pub fn bn_relu(y: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let (c, h, w) = y.chw()?;
    if bn.channels() != c {
        return Err(Error::dim(format!("batch-norm has {} channels, input has {c}", bn.channels())));
    }
    bn.validate()?;
    let hw = h * w;
    let mut out = y.data().to_vec();
    for ch in 0..c {
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v = bn_apply(bn, ch, *v).max(0.0);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Windowed max or mean over each channel.
pub fn pool2d(x: &Tensor, mode: PoolMode, size: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if size > h || size > w {
        return Err(Error::dim(format!("pool window {size} larger than {h}x{w}")));
    }
    let (oh, ow) = output_hw(h, w, size, size, stride, 0)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let area = (size * size) as f64;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = match mode {
                    PoolMode::Max => f64::NEG_INFINITY,
                    PoolMode::Avg => 0.0,
                };
                for a in 0..size {
                    let base = (ch * h + i * stride + a) * w + j * stride;
                    for &v in &xd[base..base + size] {
                        match mode {
                            PoolMode::Max => acc = acc.max(v),
                            PoolMode::Avg => acc += v,
                        }
                    }
                }
                if mode == PoolMode::Avg {
                    acc /= area;
                }
                out.push(acc);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// `W x + b` for a flat input.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (k, n) = match weight.shape() {
        &[k, n] => (k, n),
        s => return Err(Error::dim(format!("dense weight must be 2-D, got {s:?}"))),
    };
    if x.len() != n || bias.len() != k {
        return Err(Error::dim(format!(
            "dense {k}x{n} applied to input of length {} with bias {}",
            x.len(),
            bias.len()
        )));
    }
    let xd = x.data();
    let out = (0..k)
        .map(|r| {
            let mut s = 0.0;
            for (w, v) in weight.row(r).iter().zip(xd) {
                s += w * v;
            }
            s + bias[r]
        })
        .collect();
    Ok(Tensor::from_parts(vec![k], out))
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax - onehot`.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (z[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_parts(vec![k], grad)))
}

/// Reverse-mode gradient of one layer.
///
/// For skip blocks this covers the convolution path only; the identity
/// branch (gradient equal to `upstream`) is routed by the network. ReLU has
/// zero gradient at exactly zero, and batch-norm statistics are constants.
pub fn vjp(layer: &LayerParams, cache: &LayerCache, upstream: &Tensor) -> Result<(Tensor, ParamGrad)> {
    if upstream.shape() != cache.output.shape() {
        return Err(Error::CacheMismatch(format!(
            "upstream {:?} vs cached output {:?}",
            upstream.shape(),
            cache.output.shape()
        )));
    }
    match layer {
        LayerParams::Conv(p) => conv_vjp(p, cache, upstream),
        LayerParams::Pool(p) => Ok((pool_vjp(p, &cache.input, upstream)?, ParamGrad::None)),
        LayerParams::Dense(d) => {
            let (k, n) = (d.weight.shape()[0], d.weight.shape()[1]);
            if cache.input.len() != n {
                return Err(Error::CacheMismatch("dense input length".into()));
            }
            let g = upstream.data();
            let x = cache.input.data();
            let mut gx = vec![0.0; n];
            let mut gw = vec![0.0; k * n];
            for r in 0..k {
                let wr = d.weight.row(r);
                for c in 0..n {
                    gx[c] += wr[c] * g[r];
                    gw[r * n + c] = g[r] * x[c];
                }
            }
            Ok((
                Tensor::from_parts(cache.input.shape().to_vec(), gx),
                ParamGrad::Dense { weight: Tensor::from_parts(vec![k, n], gw), bias: g.to_vec() },
            ))
        }
        LayerParams::Flatten => Ok((upstream.reshape(cache.input.shape())?, ParamGrad::None)),
    }
}

fn conv_vjp(p: &ConvBlock, cache: &LayerCache, upstream: &Tensor) -> Result<(Tensor, ParamGrad)> {
    let pre =
        cache.pre_activation.as_ref().ok_or_else(|| Error::CacheMismatch("conv cache lacks pre-activation".into()))?;
    let (m, oh, ow) = pre.chw()?;
    if m != p.out_channels() || upstream.shape() != pre.shape() {
        return Err(Error::CacheMismatch("conv pre-activation shape".into()));
    }
    let (kh, kw) = p.kernel();
    let (col, coh, cow) = im2col(&cache.input, kh, kw, p.stride, p.pad)?;
    if (coh, cow) != (oh, ow) || cache.input.chw()?.0 != p.in_channels() {
        return Err(Error::CacheMismatch("conv input shape".into()));
    }
    let locs = oh * ow;
    let n = p.key_dim();
    let g = upstream.data();
    let y = pre.data();
    let bn = &p.bn;

    let mut dy = vec![0.0; m * locs];
    let mut dgamma = vec![0.0; m];
    let mut dbeta = vec![0.0; m];
    let mut dbias = vec![0.0; m];
    for o in 0..m {
        let inv = bn.inv_std(o);
        for l in 0..locs {
            let idx = o * locs + l;
            let z = bn_apply(bn, o, y[idx]);
            if z > 0.0 {
                let dz = g[idx];
                dgamma[o] += dz * ((y[idx] - bn.mean[o]) * inv);
                dbeta[o] += dz;
                let d = dz * bn.gamma[o] * inv;
                dy[idx] = d;
                dbias[o] += d;
            }
        }
    }

    let wd = p.weight.data();
    let mut dw = vec![0.0; m * n];
    let mut dcol = vec![0.0; n * locs];
    for o in 0..m {
        let dyo = &dy[o * locs..(o + 1) * locs];
        for k in 0..n {
            let crow = &col[k * locs..(k + 1) * locs];
            dw[o * n + k] = dot4(dyo, crow);
            let wv = wd[o * n + k];
            if wv != 0.0 {
                for (dc, &d) in dcol[k * locs..(k + 1) * locs].iter_mut().zip(dyo) {
                    *dc += wv * d;
                }
            }
        }
    }
    let dx = col2im(&dcol, cache.input.chw()?, kh, kw, p.stride, p.pad, oh, ow);
    Ok((
        Tensor::from_parts(cache.input.shape().to_vec(), dx),
        ParamGrad::Conv {
            weight: Tensor::from_parts(p.weight.shape().to_vec(), dw),
            bias: dbias,
            gamma: dgamma,
            beta: dbeta,
        },
    ))
}

/// Dot product with four interleaved accumulators (fixed order).
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn pool_vjp(p: &Pool, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = output_hw(h, w, p.size, p.size, p.stride, 0)?;
    if upstream.shape() != [c, oh, ow] {
        return Err(Error::CacheMismatch("pool upstream shape".into()));
    }
    let xd = input.data();
    let g = upstream.data();
    let mut gx = vec![0.0; c * h * w];
    let area = (p.size * p.size) as f64;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let gv = g[(ch * oh + i) * ow + j];
                match p.mode {
                    PoolMode::Max => {
                        // first maximal element in row-major window order
                        let mut best = (f64::NEG_INFINITY, 0usize);
                        for a in 0..p.size {
                            for b in 0..p.size {
                                let idx = (ch * h + i * p.stride + a) * w + j * p.stride + b;
                                if xd[idx] > best.0 {
                                    best = (xd[idx], idx);
                                }
                            }
                        }
                        gx[best.1] += gv;
                    }
                    PoolMode::Avg => {
                        let share = gv / area;
                        for a in 0..p.size {
                            for b in 0..p.size {
                                gx[(ch * h + i * p.stride + a) * w + j * p.stride + b] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn scalar_conv(weight: f64) -> ConvBlock {
        ConvBlock {
            weight: t(&[1, 1, 1, 1], &[weight]),
            bias: vec![0.0],
            bn: BatchNorm::identity(1),
            stride: 1,
            pad: 0,
            skip_from: None,
        }
    }

    #[test]
    fn unfold_identity_patching() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let u = unfold(&x, 1, 1, 1, 0).unwrap();
        assert_eq!(u.shape(), &[4, 1]);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_whole_image_and_2x2() {
        let vals: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = t(&[1, 3, 3], &vals);
        let u = unfold(&x, 3, 3, 1, 0).unwrap();
        assert_eq!(u.shape(), &[1, 9]);
        assert_eq!(u.data(), vals.as_slice());
        let u = unfold(&x, 2, 2, 1, 0).unwrap();
        assert_eq!(u.shape(), &[4, 4]);
        assert_eq!(u.row(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(u.row(3), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn unfold_pads_with_zeros_and_rejects_large_kernels() {
        let x = t(&[1, 1, 1], &[7.0]);
        let u = unfold(&x, 3, 3, 1, 1).unwrap();
        assert_eq!(u.row(0), &[0.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(unfold(&x, 2, 2, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_scalar_kernel() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv2d(&x, &scalar_conv(2.0)).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert!(conv2d(&x, &scalar_conv(1.0)).unwrap().bit_eq(&x));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(&[2, 2, 2], &[0.0; 8]);
        assert!(matches!(conv2d(&x, &scalar_conv(1.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn bn_relu_cases() {
        let y = t(&[1, 1, 2], &[-1.0, 2.0]);
        assert_eq!(bn_relu(&y, &BatchNorm::identity(1)).unwrap().data(), &[0.0, 2.0]);

        let mut bn = BatchNorm::identity(1);
        bn.gamma[0] = 0.0;
        bn.beta[0] = -3.0;
        assert_eq!(bn_relu(&y, &bn).unwrap().data(), &[0.0, 0.0]);

        let bn = BatchNorm { gamma: vec![2.0], beta: vec![1.0], mean: vec![1.0], var: vec![4.0], eps: 0.0 };
        assert_eq!(bn_relu(&t(&[1, 1, 1], &[3.0]), &bn).unwrap().data(), &[3.0]);
    }

    #[test]
    fn pooling() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool2d(&x, PoolMode::Max, 2, 2).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&x, PoolMode::Avg, 2, 2).unwrap().data(), &[2.5]);
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let x = t(&[1, 4, 4], &ramp);
        assert_eq!(pool2d(&x, PoolMode::Max, 2, 2).unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
        assert!(pool2d(&x, PoolMode::Max, 5, 1).is_err());
    }

    #[test]
    fn dense_cases() {
        let x = t(&[2], &[1.0, 1.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(dense(&x, &w, &[0.0, 1.0]).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(dense(&x, &Tensor::identity(2), &[0.0, 0.0]).unwrap().data(), x.data());
        assert_eq!(dense(&x, &Tensor::zeros(&[2, 2]), &[5.0, 6.0]).unwrap().data(), &[5.0, 6.0]);
        assert!(dense(&t(&[3], &[0.0; 3]), &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn xent_cases() {
        let (loss, g) = softmax_xent(&t(&[4], &[0.3; 4]), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(g.data().iter().sum::<f64>().abs() < 1e-12);
        let (loss, _) = softmax_xent(&t(&[4], &[50.0, 0.0, 0.0, 0.0]), 0).unwrap();
        assert!(loss < 1e-20);
        assert!(matches!(softmax_xent(&t(&[2], &[0.0, 0.0]), 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn dense_vjp_identity_passes_upstream() {
        let layer = LayerParams::Dense(Dense { weight: Tensor::identity(3), bias: vec![0.0; 3] });
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let cache = layer.forward(&x).unwrap();
        let up = t(&[3], &[0.1, 0.2, 0.3]);
        let (gx, _) = vjp(&layer, &cache, &up).unwrap();
        assert_eq!(gx.data(), up.data());
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut c = scalar_conv(1.0);
        c.bias[0] = -10.0;
        let layer = LayerParams::Conv(c);
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let cache = layer.forward(&x).unwrap();
        let (gx, pg) = vjp(&layer, &cache, &t(&[1, 2, 2], &[1.0; 4])).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        match pg {
            ParamGrad::Conv { weight, .. } => assert!(weight.data().iter().all(|&v| v == 0.0)),
            _ => panic!("expected conv grads"),
        }
    }

    #[test]
    fn vjp_rejects_mismatched_cache() {
        let layer = LayerParams::Conv(scalar_conv(1.0));
        let x = t(&[1, 2, 2], &[1.0; 4]);
        let mut cache = layer.forward(&x).unwrap();
        cache.pre_activation = None;
        assert!(matches!(vjp(&layer, &cache, &t(&[1, 2, 2], &[1.0; 4])), Err(Error::CacheMismatch(_))));
    }
}
