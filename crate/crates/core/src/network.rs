//! Sequential CNN feature extractor.
//!
//! A [`NetworkSpec`] describes the layer stack; a [`Network`] binds it to
//! parameters, either loaded from a [`WeightStore`] or drawn with a seeded
//! He-style initialization. Activations are recorded at tagged layers as
//! `[filters, positions]` matrices, and gradients injected at those tags are
//! propagated back to the input pixels.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerKind, Mode};
use crate::seed;
use crate::tensor::Tensor;
pub use crate::weights::Preprocess;
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub tag: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(tag: &str, kind: LayerKind) -> Self {
        Layer {
            tag: tag.to_string(),
            kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub input_channels: usize,
    #[serde(default)]
    pub preprocess: Preprocess,
}

impl NetworkSpec {
    /// Miniature VGG: two 3x3 conv blocks of 16 and 32 filters, each closed
    /// by a 2x2 max-pool. ReLU outputs are tagged `c1`..`c4`.
    pub fn desk_scale() -> Self {
        let mut layers = Vec::new();
        for (i, width) in [16, 16, 32, 32].into_iter().enumerate() {
            let n = i + 1;
            layers.push(Layer::new(&format!("conv{n}"), LayerKind::conv3x3(width)));
            layers.push(Layer::new(&format!("c{n}"), LayerKind::Relu));
            if n % 2 == 0 {
                layers.push(Layer::new(
                    &format!("pool{}", n / 2),
                    LayerKind::MaxPool { k: 2, stride: 2 },
                ));
            }
        }
        NetworkSpec {
            layers,
            input_channels: 3,
            preprocess: Preprocess::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::InvalidConfig("input_channels must be positive".into()));
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            if layer.tag.is_empty() {
                return Err(Error::InvalidConfig("layer tags must be non-empty".into()));
            }
            if !seen.insert(layer.tag.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate layer tag `{}`", layer.tag)));
            }
            layer.kind.validate()?;
        }
        self.preprocess.validate(self.input_channels)
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.tag == tag)
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    /// Output shape of every layer for an input of `input_shape`.
    pub fn shape_chain(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        if input_shape.len() != 3 || input_shape[0] != self.input_channels {
            return Err(Error::shape(
                "shape_chain",
                format!(
                    "input {input_shape:?} does not fit a {}-channel network",
                    self.input_channels
                ),
            ));
        }
        let mut shape = input_shape.to_vec();
        let mut chain = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer_output_shape(&layer.kind, &shape)?;
            chain.push(shape.clone());
        }
        Ok(chain)
    }
}

fn layer_output_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    let spatial = |op: &'static str| -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, format!("expected [C,H,W], got {input:?}"))),
        }
    };
    Ok(match *kind {
        LayerKind::Conv {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let (_, h, w) = spatial("conv2d")?;
            let (ho, wo) = layers::conv_output_hw(h, w, kernel_h, kernel_w, stride, padding)?;
            vec![out_channels, ho, wo]
        }
        LayerKind::MaxPool { k, stride } | LayerKind::AvgPool { k, stride } => {
            let (c, h, w) = spatial("pool")?;
            if h < k || w < k {
                return Err(Error::shape("pool", format!("window {k} exceeds {h}x{w}")));
            }
            vec![c, (h - k) / stride + 1, (w - k) / stride + 1]
        }
        LayerKind::Flatten => vec![input.iter().product()],
        LayerKind::Dense { out_features } => vec![out_features],
        LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::Softmax => input.to_vec(),
    })
}

/// Weights and bias of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Tagged activations as `[N_l, M_l]` matrices (filters x positions).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationSet(BTreeMap<String, Tensor>);

impl From<BTreeMap<String, Tensor>> for ActivationSet {
    fn from(map: BTreeMap<String, Tensor>) -> Self {
        ActivationSet(map)
    }
}

impl ActivationSet {
    pub fn get(&self, tag: &str) -> Result<&Tensor> {
        self.0.get(tag).ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

/// Reshape a layer output to `[N, M]`: channels by spatial positions, or a
/// single column for vectors.
fn as_feature_matrix(t: &Tensor) -> Result<Tensor> {
    let (n, m) = match *t.shape() {
        [c, h, w] => (c, h * w),
        [n] => (n, 1),
        _ => (t.shape()[0], t.len() / t.shape()[0]),
    };
    t.clone().reshape(&[n, m])
}

/// Per-layer parameter gradients from a training backward pass.
pub type ParamGrads = Vec<Option<Params>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<Params>>,
}

impl Network {
    /// Binds `spec` to the tensors in `store`. Convolution shapes are checked
    /// against the channel chain now; dense input widths when first used.
    pub fn from_store(spec: NetworkSpec, store: &WeightStore) -> Result<Self> {
        let mut spec = spec;
        spec.preprocess = store.metadata().clone();
        spec.validate()?;
        let mut channels = Some(spec.input_channels);
        let mut params = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let bound = if layer.kind.has_params() {
                let (w, b) = store.layer(&layer.tag).ok_or_else(|| {
                    Error::Format(format!("weight store has no entry for layer `{}`", layer.tag))
                })?;
                check_param_shapes(&layer.tag, &layer.kind, w, b, channels)?;
                Some(Params {
                    weights: w.clone(),
                    bias: b.clone(),
                })
            } else {
                None
            };
            channels = match layer.kind {
                LayerKind::Conv { out_channels, .. } => Some(out_channels),
                LayerKind::Flatten | LayerKind::Dense { .. } => None,
                _ => channels,
            };
            params.push(bound);
        }
        Ok(Network { spec, params })
    }

    /// Seeded He-style initialization: weights ~ N(0, 2 / fan_in), zero bias.
    pub fn init(spec: NetworkSpec, input_shape: &[usize], seed: u64) -> Result<Self> {
        spec.validate()?;
        let chain = spec.shape_chain(input_shape)?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = if i == 0 { input_shape } else { &chain[i - 1][..] };
            params.push(match layer.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => {
                    let fan_in = input[0] * kernel_h * kernel_w;
                    Some(Params {
                        weights: Tensor::normal(
                            &[out_channels, input[0], kernel_h, kernel_w],
                            (2.0 / fan_in as f32).sqrt(),
                            &mut rng,
                        ),
                        bias: Tensor::zeros(&[out_channels]),
                    })
                }
                LayerKind::Dense { out_features } => {
                    let fan_in: usize = input.iter().product();
                    Some(Params {
                        weights: Tensor::normal(
                            &[out_features, fan_in],
                            (2.0 / fan_in as f32).sqrt(),
                            &mut rng,
                        ),
                        bias: Tensor::zeros(&[out_features]),
                    })
                }
                _ => None,
            });
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params>] {
        &mut self.params
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new(self.spec.preprocess.clone());
        for (layer, p) in self.spec.layers.iter().zip(&self.params) {
            if let Some(p) = p {
                store.insert_layer(&layer.tag, p.weights.clone(), p.bias.clone());
            }
        }
        store
    }

    pub fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if c != self.spec.input_channels {
            return Err(Error::shape(
                "preprocess",
                format!("image has {c} channels, network expects {}", self.spec.input_channels),
            ));
        }
        let pp = &self.spec.preprocess;
        let mut out = image.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (mean, inv) = (pp.means[ch], 1.0 / pp.scales[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Ok(out)
    }

    fn forward_layer(&self, i: usize, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let p = self.params[i].as_ref();
        match self.spec.layers[i].kind {
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let p = p.expect("conv layer has params");
                layers::conv2d_forward(input, &p.weights, &p.bias, stride, padding)
            }
            LayerKind::Relu => Ok(layers::relu_forward(input)),
            LayerKind::MaxPool { k, stride } => layers::maxpool_forward(input, k, stride),
            LayerKind::AvgPool { k, stride } => layers::avgpool_forward(input, k, stride),
            LayerKind::Flatten => input.clone().reshape(&[input.len()]),
            LayerKind::Dense { .. } => {
                let p = p.expect("dense layer has params");
                layers::dense_forward(input, &p.weights, &p.bias)
            }
            LayerKind::Dropout { rate } => Ok(layers::dropout_forward(input, rate, layer_mode(mode, i))),
            LayerKind::Softmax => Ok(layers::softmax_forward(input)),
        }
    }

    /// Gradient with respect to the layer input and, when requested, the
    /// layer parameters.
    fn backward_layer(
        &self,
        i: usize,
        input: &Tensor,
        output: &Tensor,
        grad: &Tensor,
        mode: Mode,
        want_params: bool,
    ) -> Result<(Tensor, Option<Params>)> {
        let p = self.params[i].as_ref();
        Ok(match self.spec.layers[i].kind {
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let p = p.expect("conv layer has params");
                if want_params {
                    let g = layers::conv2d_backward(input, &p.weights, grad, stride, padding)?;
                    (
                        g.input,
                        Some(Params {
                            weights: g.weights,
                            bias: g.bias,
                        }),
                    )
                } else {
                    let gi = layers::conv2d_backward_input(input.shape(), &p.weights, grad, stride, padding)?;
                    (gi, None)
                }
            }
            LayerKind::Relu => (layers::relu_backward(input, grad)?, None),
            LayerKind::MaxPool { k, stride } => (layers::maxpool_backward(input, k, stride, grad)?, None),
            LayerKind::AvgPool { k, stride } => (layers::avgpool_backward(input, k, stride, grad)?, None),
            LayerKind::Flatten => (grad.clone().reshape(input.shape())?, None),
            LayerKind::Dense { .. } => {
                let p = p.expect("dense layer has params");
                let g = layers::dense_backward(input, &p.weights, grad)?;
                let params = want_params.then_some(Params {
                    weights: g.weights,
                    bias: g.bias,
                });
                (g.input, params)
            }
            LayerKind::Dropout { rate } => (layers::dropout_backward(grad, rate, layer_mode(mode, i)), None),
            LayerKind::Softmax => (layers::softmax_backward(output, grad)?, None),
        })
    }

    /// Runs layers `0..=last` and returns every intermediate value: entry 0
    /// is the preprocessed image, entry `i + 1` the output of layer `i`.
    pub fn forward_trace(&self, image: &Tensor, mode: Mode, last: usize) -> Result<Vec<Tensor>> {
        let mut trace = Vec::with_capacity(last + 2);
        trace.push(self.preprocess(image)?);
        for i in 0..=last {
            let next = self.forward_layer(i, &trace[i], mode)?;
            trace.push(next);
        }
        Ok(trace)
    }

    fn resolve_tags<'a>(&self, tags: impl IntoIterator<Item = &'a str>) -> Result<BTreeSet<(usize, &'a str)>> {
        tags.into_iter()
            .map(|t| Ok((self.spec.index_of(t)?, t)))
            .collect()
    }

    /// Evaluation-mode forward pass recording post-layer activations at
    /// `tags`, reshaped to `[N_l, M_l]`.
    pub fn forward_record(&self, image: &Tensor, tags: &[&str]) -> Result<ActivationSet> {
        let wanted = self.resolve_tags(tags.iter().copied())?;
        let Some(&(last, _)) = wanted.iter().next_back() else {
            return Ok(ActivationSet::default());
        };
        let trace = self.forward_trace(image, Mode::Eval, last)?;
        let mut acts = BTreeMap::new();
        for &(i, tag) in &wanted {
            acts.insert(tag.to_string(), as_feature_matrix(&trace[i + 1])?);
        }
        Ok(ActivationSet(acts))
    }

    /// One forward pass recording `tags`, then a backward pass injecting the
    /// gradients that `loss` computes from those activations. Returns the
    /// loss output and the gradient with respect to the raw image.
    pub fn record_and_backprop<T>(
        &self,
        image: &Tensor,
        tags: &[&str],
        loss: impl FnOnce(&ActivationSet) -> Result<(T, BTreeMap<String, Tensor>)>,
    ) -> Result<(T, Tensor)> {
        let wanted = self.resolve_tags(tags.iter().copied())?;
        let Some(&(last, _)) = wanted.iter().next_back() else {
            let (value, _) = loss(&ActivationSet::default())?;
            return Ok((value, Tensor::zeros(image.shape())));
        };
        let trace = self.forward_trace(image, Mode::Eval, last)?;
        let mut acts = BTreeMap::new();
        for &(i, tag) in &wanted {
            acts.insert(tag.to_string(), as_feature_matrix(&trace[i + 1])?);
        }
        let (value, grads) = loss(&ActivationSet(acts))?;
        let grad = self.backprop_from(&trace, last, &grads)?;
        Ok((value, grad))
    }

    /// Chain-rule accumulation of gradients injected at tagged activations
    /// down to the raw image, including the preprocessing scale.
    pub fn backward_to_input(&self, image: &Tensor, grads: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let wanted = self.resolve_tags(grads.keys().map(String::as_str))?;
        let Some(&(last, _)) = wanted.iter().next_back() else {
            self.preprocess(image)?;
            return Ok(Tensor::zeros(image.shape()));
        };
        let trace = self.forward_trace(image, Mode::Eval, last)?;
        self.backprop_from(&trace, last, grads)
    }

    fn backprop_from(&self, trace: &[Tensor], last: usize, grads: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let mut grad = Tensor::zeros(trace[last + 1].shape());
        for i in (0..=last).rev() {
            if let Some(injected) = grads.get(&self.spec.layers[i].tag) {
                let out_shape = trace[i + 1].shape();
                let expected = as_feature_matrix(&trace[i + 1])?;
                if injected.shape() != expected.shape() {
                    return Err(Error::shape(
                        "backward_to_input",
                        format!(
                            "gradient for `{}` is {:?}, activation is {:?}",
                            self.spec.layers[i].tag,
                            injected.shape(),
                            expected.shape()
                        ),
                    ));
                }
                grad.axpy(1.0, &injected.clone().reshape(out_shape)?)?;
            }
            grad = self
                .backward_layer(i, &trace[i], &trace[i + 1], &grad, Mode::Eval, false)?
                .0;
        }
        let (_, h, w) = grad.dims3()?;
        let scales = &self.spec.preprocess.scales;
        for (ch, plane) in grad.data_mut().chunks_mut(h * w).enumerate() {
            let inv = 1.0 / scales[ch];
            plane.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(grad)
    }

    /// Parameter gradients for a training step given a forward trace over
    /// layers `0..=last` and the gradient of the loss at layer `last`'s output.
    pub fn backward_params(&self, trace: &[Tensor], grad_output: &Tensor, mode: Mode) -> Result<ParamGrads> {
        let last = trace.len() - 2;
        let mut grads: ParamGrads = vec![None; self.params.len()];
        let mut grad = grad_output.clone();
        for i in (0..=last).rev() {
            let need_input = self.params[..i].iter().any(Option::is_some);
            let want = self.params[i].is_some();
            if !need_input {
                if want {
                    grads[i] = self.backward_layer(i, &trace[i], &trace[i + 1], &grad, mode, true)?.1;
                }
                break;
            }
            let (gi, gp) = self.backward_layer(i, &trace[i], &trace[i + 1], &grad, mode, want)?;
            grads[i] = gp;
            grad = gi;
        }
        Ok(grads)
    }
}

/// Each dropout layer gets its own mask stream under the step seed.
fn layer_mode(mode: Mode, layer: usize) -> Mode {
    match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train { seed } => Mode::Train {
            seed: seed::derive_seed(seed, layer as u64),
        },
    }
}

fn check_param_shapes(
    tag: &str,
    kind: &LayerKind,
    w: &Tensor,
    b: &Tensor,
    channels: Option<usize>,
) -> Result<()> {
    let bad = |detail: String| Err(Error::shape("bind", format!("layer `{tag}`: {detail}")));
    match *kind {
        LayerKind::Conv {
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let (o, c, kh, kw) = w.dims4()?;
            if o != out_channels || kh != kernel_h || kw != kernel_w {
                return bad(format!("weights {:?} do not match {kind:?}", w.shape()));
            }
            if let Some(expected) = channels {
                if c != expected {
                    return bad(format!("weights take {c} input channels, chain provides {expected}"));
                }
            }
            if b.shape() != [o] {
                return bad(format!("bias {:?} should be [{o}]", b.shape()));
            }
        }
        LayerKind::Dense { out_features } => {
            let (o, _) = w.dims2()?;
            if o != out_features || b.shape() != [o] {
                return bad(format!("weights {:?} / bias {:?}", w.shape(), b.shape()));
            }
        }
        _ => {}
    }
    Ok(())
}
