//! Dense row-major `f32` tensors and the primitive operations of the model.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const LN_EPS: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected C x H x W, got {:?}", self.shape))),
        }
    }

    pub fn ensure_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn leaky_relu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Zero-padded 2D convolution (cross-correlation), `padding = k / 2`.
/// `input` is `cin x h x w`, `weight` is `cout x cin x k x k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_raw(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    k: usize,
    stride: usize,
    bias: Option<&[f32]>,
) -> (Vec<f32>, usize, usize) {
    let p = (k / 2) as isize;
    let oh = (h + 2 * p as usize - k) / stride + 1;
    let ow = (w + 2 * p as usize - k) / stride + 1;
    let mut out = vec![0f32; cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - p;
                    // output columns whose input column stays inside the image
                    let lo = if dx < 0 { ((-dx) as usize).div_ceil(stride) } else { 0 };
                    let hi_num = w as isize - 1 - dx;
                    if hi_num < 0 {
                        continue;
                    }
                    let hi = ((hi_num as usize) / stride + 1).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = (lo as isize + dx) as usize;
                            for (o, i) in orow[lo..hi].iter_mut().zip(&row[off..off + hi - lo]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * row[(ox as isize * stride as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    (out, oh, ow)
}

/// Convolution of a `cin x h x w` tensor with a `cout x cin x k x k` kernel.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (cin, h, w) = x.chw()?;
    let [cout, wcin, k, k2] = weight.shape[..] else {
        return Err(Error::Shape(format!("conv kernel must be rank 4, got {:?}", weight.shape)));
    };
    if wcin != cin || k != k2 || k % 2 == 0 {
        return Err(Error::Shape(format!(
            "kernel {:?} does not fit input {:?}",
            weight.shape, x.shape
        )));
    }
    if let Some(b) = bias {
        b.ensure_shape(&[cout])?;
    }
    let (data, oh, ow) = conv2d_raw(&x.data, cin, h, w, &weight.data, cout, k, stride, bias.map(|b| &b.data[..]));
    Ok(Tensor {
        shape: vec![cout, oh, ow],
        data,
    })
}

/// Depthwise zero-padded `k x k` convolution; `weight` is `c x 1 x k x k`.
pub fn depthwise_conv2d(input: &[f32], c: usize, h: usize, w: usize, weight: &[f32], k: usize, bias: &[f32]) -> Vec<f32> {
    let p = (k / 2) as isize;
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let kw = &weight[ch * k * k..(ch + 1) * k * k];
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[ch];
                for ky in 0..k {
                    let iy = y as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            acc += kw[ky * k + kx] * src[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// `y = x W^T + b` for `n` row vectors; `weight` is `cout x cin`.
pub fn linear(x: &[f32], n: usize, cin: usize, weight: &[f32], bias: &[f32], cout: usize) -> Vec<f32> {
    let mut out = vec![0f32; n * cout];
    for (row, o) in x.chunks_exact(cin).zip(out.chunks_exact_mut(cout)).take(n) {
        for (j, oj) in o.iter_mut().enumerate() {
            let wr = &weight[j * cin..(j + 1) * cin];
            *oj = bias[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f32>();
        }
    }
    out
}

/// Layer normalisation over the last dimension of `n x c` rows.
pub fn layer_norm(x: &[f32], c: usize, gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i]));
    }
    out
}

/// Rearranges `C*r*r x h x w` into `C x h*r x w*r`:
/// `out[c, y*r + i, x*r + j] = in[c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cr, h, w) = x.chw()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::Shape(format!("{cr} channels not divisible by r^2 = {}", r * r)));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src = &x.data[((ch * r + i) * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + y * r + i) * ow + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data: out,
    })
}

pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let mut out = vec![0f32; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, 2 * h, 2 * w],
        data: out,
    })
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let m = i % p;
    if m < n {
        m
    } else {
        p - m
    }
}

/// Reflect-pads the bottom and right edges of `C x h x w` to `nh x nw`.
pub fn reflect_pad(x: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if nh < h || nw < w {
        return Err(Error::Shape(format!("cannot pad {h}x{w} down to {nh}x{nw}")));
    }
    if (nh, nw) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for y in 0..nh {
            let row = &x.data[(ch * h + reflect(y, h)) * w..][..w];
            out.extend((0..nw).map(|xx| row[reflect(xx, w)]));
        }
    }
    Ok(Tensor {
        shape: vec![c, nh, nw],
        data: out,
    })
}

/// Top-left `h x w` region of every channel.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, xh, xw) = x.chw()?;
    if h > xh || w > xw {
        return Err(Error::Shape(format!("cannot crop {xh}x{xw} to {h}x{w}")));
    }
    if (h, w) == (xh, xw) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            out.extend_from_slice(&x.data[(ch * xh + y) * xw..][..w]);
        }
    }
    Ok(Tensor {
        shape: vec![c, h, w],
        data: out,
    })
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (h, w) != (hb, wb) {
        return Err(Error::Shape(format!("cannot concat {:?} with {:?}", a.shape, b.shape)));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        shape: vec![ca + cb, h, w],
        data,
    })
}

pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}
