//! Differentiable layer primitives.
//!
//! Every function here is pure: forward maps take tensors and return new
//! tensors, backward maps take the forward inputs plus the upstream gradient
//! and return exact gradients with respect to every input. Images and feature
//! maps are `[channels, height, width]`; convolution weights are
//! `[out, in, kh, kw]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::counter_uniform;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
    Dropout {
        rate: f32,
    },
    Softmax,
}

impl LayerKind {
    pub fn conv3x3(out_channels: usize) -> Self {
        LayerKind::Conv {
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerKind::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => out_channels > 0 && kernel_h > 0 && kernel_w > 0 && stride > 0,
            LayerKind::MaxPool { k, stride } | LayerKind::AvgPool { k, stride } => {
                k > 0 && stride > 0
            }
            LayerKind::Dense { out_features } => out_features > 0,
            LayerKind::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerKind::Relu | LayerKind::Flatten | LayerKind::Softmax => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid layer parameters: {self:?}")))
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

/// Whether dropout is active. Training mode carries the seed that keys the
/// counter-based mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("window {k} exceeds padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

pub fn conv_output_hw(
    h: usize,
    w: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    Ok((
        out_extent("conv2d", h, kernel_h, stride, padding)?,
        out_extent("conv2d", w, kernel_w, stride, padding)?,
    ))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = input.dims3()?;
        let (o, wc, kh, kw) = weights.dims4()?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weights expect {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ho, wo) = conv_output_hw(h, w, kh, kw, stride, pad)?;
        Ok(ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let np = self.positions();
        let mut cols = vec![0.0; self.patch() * np];
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * np..][..np];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                row[oy * self.wo + ox] = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let np = self.positions();
        let mut x = vec![0.0; self.c * self.h * self.w];
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * np..][..np];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn check_grad(&self, grad_output: &Tensor) -> Result<()> {
        if grad_output.shape() != [self.o, self.ho, self.wo] {
            return Err(Error::shape(
                "conv2d_backward",
                format!(
                    "grad_output {:?} does not match forward output {:?}",
                    grad_output.shape(),
                    [self.o, self.ho, self.wo]
                ),
            ));
        }
        Ok(())
    }
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, weights, stride, padding)?;
    if bias.shape() != [g.o] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} should be [{}]", bias.shape(), g.o),
        ));
    }
    let np = g.positions();
    let cols = g.im2col(input.data());
    let mut out = Vec::with_capacity(g.o * np);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, np));
    }
    gemm(g.o, g.patch(), np, 1.0, weights.data(), false, &cols, false, 1.0, &mut out);
    Tensor::new(vec![g.o, g.ho, g.wo], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input, weights, stride, padding)?;
    g.check_grad(grad_output)?;
    let np = g.positions();
    let cols = g.im2col(input.data());
    let mut gw = vec![0.0; g.o * g.patch()];
    gemm(g.o, np, g.patch(), 1.0, grad_output.data(), false, &cols, true, 0.0, &mut gw);
    let gb: Vec<f32> = grad_output
        .data()
        .chunks(np)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    Ok(ConvGrads {
        input: conv_grad_input(&g, weights, grad_output)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.o], gb)?,
    })
}

/// Gradient with respect to the input only; skips the weight gradient work.
pub fn conv2d_backward_input(
    input_shape: &[usize],
    weights: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let g = ConvGeom::new(&probe, weights, stride, padding)?;
    g.check_grad(grad_output)?;
    conv_grad_input(&g, weights, grad_output)
}

fn conv_grad_input(g: &ConvGeom, weights: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    let np = g.positions();
    let mut gcols = vec![0.0; g.patch() * np];
    gemm(g.patch(), g.o, np, 1.0, weights.data(), true, grad_output.data(), false, 0.0, &mut gcols);
    Tensor::new(vec![g.c, g.h, g.w], g.col2im(&gcols))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(grad_output, "relu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn pool_geom(op: &'static str, x: &Tensor, k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if k == 0 || stride == 0 {
        return Err(Error::shape(op, "window and stride must be positive"));
    }
    Ok((c, h, w, out_extent(op, h, k, stride, 0)?, out_extent(op, w, k, stride, 0)?))
}

/// Flat input index of each pooled output's maximum; lowest index wins ties.
fn maxpool_argmax(x: &Tensor, k: usize, stride: usize) -> Result<(Vec<usize>, [usize; 3])> {
    let (c, h, w, ho, wo) = pool_geom("maxpool", x, k, stride)?;
    let d = x.data();
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for i in 0..k {
                    for j in 0..k {
                        let at = (ch * h + oy * stride + i) * w + ox * stride + j;
                        if d[at] > d[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [c, ho, wo]))
}

pub fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (idx, shape) = maxpool_argmax(x, k, stride)?;
    let d = x.data();
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| d[i]).collect())
}

pub fn maxpool_backward(x: &Tensor, k: usize, stride: usize, grad_output: &Tensor) -> Result<Tensor> {
    let (idx, shape) = maxpool_argmax(x, k, stride)?;
    if grad_output.shape() != shape {
        return Err(Error::shape(
            "maxpool_backward",
            format!("grad_output {:?} vs output {:?}", grad_output.shape(), shape),
        ));
    }
    let mut gx = Tensor::zeros(x.shape());
    let gd = gx.data_mut();
    for (&i, &g) in idx.iter().zip(grad_output.data()) {
        gd[i] += g;
    }
    Ok(gx)
}

pub fn avgpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w, ho, wo) = pool_geom("avgpool", x, k, stride)?;
    let d = x.data();
    let norm = 1.0 / (k * k) as f32;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0f32;
                for i in 0..k {
                    let row = (ch * h + oy * stride + i) * w + ox * stride;
                    s += d[row..row + k].iter().sum::<f32>();
                }
                out.push(s * norm);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn avgpool_backward(x: &Tensor, k: usize, stride: usize, grad_output: &Tensor) -> Result<Tensor> {
    let (c, h, w, ho, wo) = pool_geom("avgpool", x, k, stride)?;
    if grad_output.shape() != [c, ho, wo] {
        return Err(Error::shape(
            "avgpool_backward",
            format!("grad_output {:?} vs output {:?}", grad_output.shape(), [c, ho, wo]),
        ));
    }
    let norm = 1.0 / (k * k) as f32;
    let mut gx = Tensor::zeros(x.shape());
    let gd = gx.data_mut();
    let go = grad_output.data();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = go[(ch * ho + oy) * wo + ox] * norm;
                for i in 0..k {
                    let row = (ch * h + oy * stride + i) * w + ox * stride;
                    gd[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    Ok(gx)
}

/// `y = W x + b` where `x` is read as a flat vector of length `in`.
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = weights.dims2()?;
    if x.len() != inp || bias.shape() != [out] {
        return Err(Error::shape(
            "dense",
            format!(
                "input of {} elements, weights {:?}, bias {:?}",
                x.len(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut y = bias.data().to_vec();
    gemm(out, inp, 1, 1.0, weights.data(), false, x.data(), false, 1.0, &mut y);
    Tensor::new(vec![out], y)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, weights: &Tensor, grad_output: &Tensor) -> Result<DenseGrads> {
    let (out, inp) = weights.dims2()?;
    if x.len() != inp || grad_output.len() != out {
        return Err(Error::shape(
            "dense_backward",
            format!(
                "input of {} elements, weights {:?}, grad_output {:?}",
                x.len(),
                weights.shape(),
                grad_output.shape()
            ),
        ));
    }
    let mut gx = vec![0.0; inp];
    gemm(inp, out, 1, 1.0, weights.data(), true, grad_output.data(), false, 0.0, &mut gx);
    let mut gw = vec![0.0; out * inp];
    gemm(out, 1, inp, 1.0, grad_output.data(), false, x.data(), false, 0.0, &mut gw);
    Ok(DenseGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        weights: Tensor::new(vec![out, inp], gw)?,
        bias: Tensor::new(vec![out], grad_output.data().to_vec())?,
    })
}

/// Softmax over all elements of `x`.
pub fn softmax_forward(x: &Tensor) -> Tensor {
    let max = x.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = x.data().iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut p = Tensor::zeros(x.shape());
    p.data_mut()
        .iter_mut()
        .zip(&exps)
        .for_each(|(o, &e)| *o = (e / total) as f32);
    p
}

/// Backward through softmax given its output `probs`.
pub fn softmax_backward(probs: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    probs.ensure_same_shape(grad_output, "softmax_backward")?;
    let inner = probs.dot(grad_output)? as f32;
    let data = probs
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&p, &g)| p * (g - inner))
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}

/// Cross-entropy of `softmax(logits)` against `label`, with the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if label >= logits.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    let mut grad = softmax_forward(logits);
    let p = grad.data()[label] as f64;
    let max = logits.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max
        + logits
            .data()
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    let loss = lse - logits.data()[label] as f64;
    debug_assert!(p.is_finite());
    grad.data_mut()[label] -= 1.0;
    Ok((loss, grad))
}

fn dropout_keep(rate: f32, seed: u64, i: usize) -> bool {
    counter_uniform(seed, i as u64) >= rate
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub fn dropout_forward(x: &Tensor, rate: f32, mode: Mode) -> Tensor {
    match mode {
        Mode::Eval => x.clone(),
        Mode::Train { seed } => {
            let keep_scale = 1.0 / (1.0 - rate);
            let mut y = x.clone();
            y.data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                *v = if dropout_keep(rate, seed, i) { *v * keep_scale } else { 0.0 };
            });
            y
        }
    }
}

pub fn dropout_backward(grad_output: &Tensor, rate: f32, mode: Mode) -> Tensor {
    dropout_forward(grad_output, rate, mode)
}
