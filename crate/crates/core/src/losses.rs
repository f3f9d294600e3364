//! Content, Gram-matrix style and total-variation losses.
//!
//! Feature maps are `[N, M]` matrices: `N` filters by `M` spatial positions.
//! Loss values are accumulated in `f64`; gradients are `f32` tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ActivationSet, Network};
use crate::tensor::{gemm, Tensor};

/// `G = F F^T`, unnormalized.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let (n, m) = features.dims2()?;
    let mut g = vec![0.0; n * n];
    gemm(n, m, n, 1.0, features.data(), false, features.data(), true, 0.0, &mut g);
    Tensor::new(vec![n, n], g)
}

/// `½ Σ (F - P)²` and its gradient `F - P`.
pub fn content_loss(features: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    features.dims2()?;
    let diff = features.sub(target).map_err(|_| {
        Error::shape(
            "content_loss",
            format!("{:?} vs {:?}", features.shape(), target.shape()),
        )
    })?;
    let value = 0.5 * diff.data().iter().map(|&d| d as f64 * d as f64).sum::<f64>();
    Ok((value, diff))
}

/// `E = Σ (G - A)² / (4 N² M²)` with `G = gram(F)`; gradient
/// `(G - A) F / (N² M²)`.
pub fn style_energy(features: &Tensor, target_gram: &Tensor) -> Result<(f64, Tensor)> {
    let (n, m) = features.dims2()?;
    if target_gram.shape() != [n, n] {
        return Err(Error::shape(
            "style_energy",
            format!("target gram {:?} for {n} filters", target_gram.shape()),
        ));
    }
    let mut diff = gram(features)?;
    diff.axpy(-1.0, target_gram)?;
    let nm2 = (n as f64 * m as f64).powi(2);
    let value = diff.data().iter().map(|&d| d as f64 * d as f64).sum::<f64>() / (4.0 * nm2);
    let mut grad = vec![0.0; n * m];
    gemm(n, n, m, (1.0 / nm2) as f32, diff.data(), false, features.data(), false, 0.0, &mut grad);
    Ok((value, Tensor::new(vec![n, m], grad)?))
}

/// Gram statistics of the reference image at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStyle {
    pub gram: Tensor,
    pub filters: usize,
    pub positions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleTarget {
    pub layers: BTreeMap<String, LayerStyle>,
}

impl StyleTarget {
    pub fn from_activations(acts: &ActivationSet) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for tag in acts.tags() {
            let f = acts.get(tag)?;
            let (filters, positions) = f.dims2()?;
            layers.insert(
                tag.to_string(),
                LayerStyle {
                    gram: gram(f)?,
                    filters,
                    positions,
                },
            );
        }
        Ok(StyleTarget { layers })
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }
}

/// Content features at one layer, plus the source image they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentTarget {
    pub tag: String,
    pub features: Tensor,
    pub image: Tensor,
}

/// `Σ_l w_l E_l` over the target's layers, with per-tag gradients `w_l ∂E_l/∂F_l`.
pub fn style_loss(
    acts: &ActivationSet,
    targets: &StyleTarget,
    layer_weights: &BTreeMap<String, f64>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for (tag, target) in &targets.layers {
        let w = *layer_weights
            .get(tag)
            .ok_or_else(|| Error::UnknownTag(tag.clone()))?;
        let (e, g) = style_energy(acts.get(tag)?, &target.gram)?;
        value += w * e;
        grads.insert(tag.clone(), g.scale(w as f32));
    }
    Ok((value, grads))
}

/// Squared-difference total variation over vertical and horizontal
/// neighbours in each channel.
pub fn tv_loss(image: &Tensor) -> Result<(f64, Tensor)> {
    let (c, h, w) = image.dims3()?;
    if h * w < 2 {
        return Err(Error::shape("tv_loss", format!("{h}x{w} image has no neighbours")));
    }
    let x = image.data();
    let mut grad = Tensor::zeros(image.shape());
    let g = grad.data_mut();
    let mut value = 0.0f64;
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let at = base + i * w + j;
                if i + 1 < h {
                    let d = x[at + w] - x[at];
                    value += d as f64 * d as f64;
                    g[at + w] += 2.0 * d;
                    g[at] -= 2.0 * d;
                }
                if j + 1 < w {
                    let d = x[at + 1] - x[at];
                    value += d as f64 * d as f64;
                    g[at + 1] += 2.0 * d;
                    g[at] -= 2.0 * d;
                }
            }
        }
    }
    Ok((value, grad))
}

/// Relative weights of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content_weight: f64,
    pub style_weight: f64,
    pub tv_weight: f64,
    pub layer_weights: BTreeMap<String, f64>,
}

impl LossWeights {
    pub const DEFAULT_CONTENT: f64 = 0.0003;
    pub const DEFAULT_STYLE: f64 = 1.0;
    pub const DEFAULT_TV: f64 = 0.00001;

    /// Default term weights with `1 / L` on each style layer.
    pub fn uniform<S: AsRef<str>>(style_tags: &[S]) -> Self {
        let w = 1.0 / style_tags.len().max(1) as f64;
        LossWeights {
            content_weight: Self::DEFAULT_CONTENT,
            style_weight: Self::DEFAULT_STYLE,
            tv_weight: Self::DEFAULT_TV,
            layer_weights: style_tags.iter().map(|t| (t.as_ref().to_string(), w)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.content_weight, self.style_weight, self.tv_weight]
            .into_iter()
            .chain(self.layer_weights.values().copied());
        if all.clone().any(|w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        let sum: f64 = self.layer_weights.values().sum();
        if !self.layer_weights.is_empty() && (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("style layer weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Unweighted term values and the weighted total at one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub total: f64,
}

/// `α L_content + β L_style + tv L_tv` and its gradient with respect to the
/// image pixels.
pub fn total_loss(
    image: &Tensor,
    net: &Network,
    content: &ContentTarget,
    style: &StyleTarget,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let (alpha, beta) = (weights.content_weight, weights.style_weight);
    let mut breakdown = LossBreakdown::default();
    let mut grad = if alpha == 0.0 && beta == 0.0 {
        Tensor::zeros(image.shape())
    } else {
        let mut tags: Vec<&str> = style.tags().collect();
        if !tags.contains(&content.tag.as_str()) {
            tags.push(&content.tag);
        }
        let ((lc, ls), grad) = net.record_and_backprop(image, &tags, |acts| {
            let (lc, gc) = content_loss(acts.get(&content.tag)?, &content.features)?;
            let (ls, gs) = style_loss(acts, style, &weights.layer_weights)?;
            let mut grads: BTreeMap<String, Tensor> = gs
                .into_iter()
                .map(|(tag, g)| (tag, g.scale(beta as f32)))
                .collect();
            let gc = gc.scale(alpha as f32);
            match grads.get_mut(&content.tag) {
                Some(g) => g.axpy(1.0, &gc)?,
                None => {
                    grads.insert(content.tag.clone(), gc);
                }
            }
            Ok(((lc, ls), grads))
        })?;
        breakdown.content = lc;
        breakdown.style = ls;
        grad
    };
    let tv = weights.tv_weight;
    if tv != 0.0 {
        let (lt, gt) = tv_loss(image)?;
        breakdown.tv = lt;
        grad.axpy(tv as f32, &gt)?;
    }
    breakdown.total = alpha * breakdown.content + beta * breakdown.style + tv * breakdown.tv;
    Ok((breakdown, grad))
}
