//! Naive `f64` reference implementations used as test oracles, written
//! directly from the loop definitions and sharing no code with the crate.

#![allow(dead_code)]

pub mod gradcheck;

use styleaug::layers::LayerKind;
use styleaug::network::{NetworkSpec, Params};
use styleaug::seed;
use styleaug::Tensor;

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect()).unwrap()
}

/// `(out [o, ho, wo], ho, wo)` of a zero-padded cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b[oc];
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let xx = (ox * stride + j) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            s += k[((oc * c + ic) * kh + i) * kw + j] * x[(ic * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn pool(x: &[f64], (c, h, w): (usize, usize, usize), k: usize, stride: usize, max: bool) -> (Vec<f64>, usize, usize) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let window = (0..k).flat_map(|i| (0..k).map(move |j| (i, j)));
                let vals = window.map(|(i, j)| x[(ch * h + oy * stride + i) * w + ox * stride + j]);
                out.push(if max {
                    vals.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.sum::<f64>() / (k * k) as f64
                });
            }
        }
    }
    (out, ho, wo)
}

pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + (0..n).map(|i| w[o * n + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    -softmax(logits)[label].ln()
}

/// Mask draw of the inverted-dropout layer (seeded uniform per element).
pub fn dropout(x: &[f64], rate: f64, seed: u64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if (seed::counter_uniform(seed, i as u64) as f64) < rate {
                0.0
            } else {
                v / (1.0 - rate)
            }
        })
        .collect()
}

pub fn gram(f: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = (0..m).map(|k| f[i * m + k] * f[j * m + k]).sum();
        }
    }
    g
}

pub fn content(f: &[f64], p: &[f64]) -> f64 {
    0.5 * f.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

pub fn style_energy(f: &[f64], a: &[f64], n: usize, m: usize) -> f64 {
    let g = gram(f, n, m);
    let s: f64 = g.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum();
    s / (4.0 * (n * n) as f64 * (m * m) as f64)
}

pub fn tv(x: &[f64], (c, h, w): (usize, usize, usize)) -> f64 {
    let mut s = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let at = (ch * h + i) * w + j;
                if i + 1 < h {
                    s += (x[at + w] - x[at]).powi(2);
                }
                if j + 1 < w {
                    s += (x[at + 1] - x[at]).powi(2);
                }
            }
        }
    }
    s
}

/// Parameters of a network as `f64` arrays.
pub fn params64(params: &[Option<Params>]) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
    params
        .iter()
        .map(|p| p.as_ref().map(|p| (f64s(&p.weights), f64s(&p.bias))))
        .collect()
}

/// Reference forward pass. Returns the output of every layer as
/// `(shape [c, h, w] or [n], values)`, preprocessing applied first.
/// `dropout_seed` enables training-mode dropout with per-layer streams.
pub fn forward(
    spec: &NetworkSpec,
    params: &[Option<(Vec<f64>, Vec<f64>)>],
    image: &[f64],
    (h, w): (usize, usize),
    dropout_seed: Option<u64>,
) -> Vec<(Vec<usize>, Vec<f64>)> {
    let c = spec.input_channels;
    let pp = &spec.preprocess;
    let mut x: Vec<f64> = image
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / (h * w);
            (v - pp.means[ch] as f64) / pp.scales[ch] as f64
        })
        .collect();
    let mut shape = vec![c, h, w];
    let mut trace = Vec::new();
    for (li, layer) in spec.layers.iter().enumerate() {
        let dims = || (shape[0], shape[1], shape[2]);
        match layer.kind {
            LayerKind::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let (k, b) = params[li].as_ref().unwrap();
                let (y, ho, wo) = conv(&x, dims(), k, (out_channels, kernel_h, kernel_w), b, stride, padding);
                x = y;
                shape = vec![out_channels, ho, wo];
            }
            LayerKind::Relu => x = relu(&x),
            LayerKind::MaxPool { k, stride } | LayerKind::AvgPool { k, stride } => {
                let max = matches!(layer.kind, LayerKind::MaxPool { .. });
                let (y, ho, wo) = pool(&x, dims(), k, stride, max);
                x = y;
                shape = vec![shape[0], ho, wo];
            }
            LayerKind::Flatten => shape = vec![x.len()],
            LayerKind::Dense { out_features } => {
                let (k, b) = params[li].as_ref().unwrap();
                x = dense(&x, k, b);
                shape = vec![out_features];
            }
            LayerKind::Dropout { rate } => {
                if let Some(s) = dropout_seed {
                    x = dropout(&x, rate as f64, seed::derive_seed(s, li as u64));
                }
            }
            LayerKind::Softmax => x = softmax(&x),
        }
        trace.push((shape.clone(), x.clone()));
    }
    trace
}

/// Activation at `tag` as an `[N, M]` matrix (row-major, unchanged order).
pub fn at_tag<'a>(spec: &NetworkSpec, trace: &'a [(Vec<usize>, Vec<f64>)], tag: &str) -> (&'a [f64], usize, usize) {
    let i = spec.layers.iter().position(|l| l.tag == tag).unwrap();
    let (shape, v) = &trace[i];
    let n = shape[0];
    (v, n, v.len() / n)
}

/// Piecewise-linear regime of a reference trace: the sign of every ReLU
/// input and the winning offset of every max-pool window.
pub fn kink_pattern(spec: &NetworkSpec, trace: &[(Vec<usize>, Vec<f64>)]) -> Vec<u32> {
    let mut out = Vec::new();
    for (li, layer) in spec.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Relu => out.extend(trace[li].1.iter().map(|&v| (v > 0.0) as u32)),
            LayerKind::MaxPool { k, stride } => {
                let (shape, x) = &trace[li - 1];
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for i in 0..k {
                                for j in 0..k {
                                    let v = x[(ch * h + oy * stride + i) * w + ox * stride + j];
                                    if v > best.0 {
                                        best = (v, (i * k + j) as u32);
                                    }
                                }
                            }
                            out.push(best.1);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}
