//! Central finite differences of the `f64` oracles against the crate's
//! analytic gradients. Each check returns the worst relative error over its
//! randomized instances, where the error of one instance is
//! `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use styleaug::harness::classifier_spec;
use styleaug::layers::{self, Mode};
use styleaug::losses::{self, LossWeights};
use styleaug::network::{ActivationSet, Network, NetworkSpec};
use styleaug::transfer::{self, TransferConfig};
use styleaug::seed;

use super::*;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: usize = 50;

pub type Check = fn(usize, u64) -> f64;

pub const CHECKS: &[(&str, Check)] = &[
    ("conv2d", conv2d),
    ("relu", relu_check),
    ("maxpool", maxpool),
    ("avgpool", avgpool),
    ("dense", dense_check),
    ("softmax", softmax_check),
    ("softmax_cross_entropy", softmax_ce),
    ("dropout", dropout_check),
    ("content_loss", content_loss),
    ("style_energy", style_energy_check),
    ("style_loss", style_loss),
    ("tv_loss", tv_loss),
    ("total_loss", total_loss),
    ("network_params", network_params),
];

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(numeric));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    numeric_grad_at(x, &(0..x.len()).collect::<Vec<_>>(), f)
}

pub fn numeric_grad_at(x: &[f64], coords: &[usize], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x0 = p[i];
            p[i] = x0 + EPS;
            let up = f(&p);
            p[i] = x0 - EPS;
            let down = f(&p);
            p[i] = x0;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

/// Central differences of a piecewise-smooth function whose evaluation also
/// returns its kink pattern. A coordinate whose `±EPS` evaluations leave the
/// pattern at `x` straddles a kink and comes back as `None`.
pub fn smooth_numeric_grad_at(
    x: &[f64],
    coords: &[usize],
    f: impl Fn(&[f64]) -> (f64, Vec<u32>),
) -> Vec<Option<f64>> {
    let (_, at) = f(x);
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x0 = p[i];
            p[i] = x0 + EPS;
            let (up, pu) = f(&p);
            p[i] = x0 - EPS;
            let (down, pd) = f(&p);
            p[i] = x0;
            (pu == at && pd == at).then(|| (up - down) / (2.0 * EPS))
        })
        .collect()
}

/// Minimum share of coordinates a kink-aware check must keep.
pub const MIN_KEPT: f64 = 0.25;

/// Relative error over the kept coordinates, or `NaN` when too few are kept
/// for the instance to be meaningful.
pub fn rel_err_smooth(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    let (a, n): (Vec<f64>, Vec<f64>) = analytic
        .iter()
        .zip(numeric)
        .filter_map(|(&a, n)| n.map(|n| (a, n)))
        .unzip();
    if (n.len() as f64) < MIN_KEPT * numeric.len() as f64 {
        return f64::NAN;
    }
    rel_err(&a, &n)
}

/// `f32`-representable uniform values, widened to `f64`.
fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi) as f64).collect()
}

/// Distinct values at least 0.05 apart and away from zero, so a perturbation
/// of `EPS` never crosses a ReLU kink or changes a pooling argmax.
fn spaced(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..2 * n as i64).map(|k| ((k - n as i64) as f64 + 0.5) * 0.05).collect();
    grid.shuffle(rng);
    grid.truncate(n);
    grid.iter().map(|&v| v as f32 as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst error over `instances` valid draws. A `NaN` instance is replaced
/// by a fresh draw; more than `instances / 5` of those fail the check.
fn worst(instances: usize, seed_base: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let (mut worst, mut valid, mut redrawn) = (0.0f64, 0, 0);
    let mut i = 0u64;
    while valid < instances {
        let e = one(&mut seed::rng(seed::derive_seed(seed_base, i)));
        i += 1;
        if e.is_nan() {
            redrawn += 1;
            if redrawn > instances / 5 {
                return f64::INFINITY;
            }
            continue;
        }
        worst = worst.max(e);
        valid += 1;
    }
    worst
}

fn conv2d(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6));
        let (o, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
        let x = uniform(rng, c * h * w, -1.0, 1.0);
        let kw = uniform(rng, o * c * k * k, -1.0, 1.0);
        let b = uniform(rng, o, -1.0, 1.0);
        let (_, ho, wo) = conv(&x, (c, h, w), &kw, (o, k, k), &b, stride, pad);
        let r = uniform(rng, o * ho * wo, -1.0, 1.0);
        let g = layers::conv2d_backward(
            &tensor(&[c, h, w], &x),
            &tensor(&[o, c, k, k], &kw),
            &tensor(&[o, ho, wo], &r),
            stride,
            pad,
        )
        .unwrap();
        let analytic: Vec<f64> = [f64s(&g.input), f64s(&g.weights), f64s(&g.bias)].concat();
        let (nx, nk) = (x.len(), kw.len());
        let all = [x, kw, b].concat();
        let numeric = numeric_grad(&all, |p| {
            let (y, _, _) = conv(&p[..nx], (c, h, w), &p[nx..nx + nk], (o, k, k), &p[nx + nk..], stride, pad);
            dot(&y, &r)
        });
        rel_err(&analytic, &numeric)
    })
}

fn relu_check(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let n = rng.gen_range(1..=40);
        let x = spaced(rng, n);
        let r = uniform(rng, n, -1.0, 1.0);
        let g = layers::relu_backward(&tensor(&[n], &x), &tensor(&[n], &r)).unwrap();
        rel_err(&f64s(&g), &numeric_grad(&x, |p| dot(&relu(p), &r)))
    })
}

fn pool_check(instances: usize, s: u64, max: bool) -> f64 {
    worst(instances, s, |rng| {
        let (k, stride) = (rng.gen_range(2..=3), rng.gen_range(1..=2));
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(k..=6), rng.gen_range(k..=6));
        let x = spaced(rng, c * h * w);
        let (_, ho, wo) = pool(&x, (c, h, w), k, stride, max);
        let r = uniform(rng, c * ho * wo, -1.0, 1.0);
        let (xt, rt) = (tensor(&[c, h, w], &x), tensor(&[c, ho, wo], &r));
        let g = if max {
            layers::maxpool_backward(&xt, k, stride, &rt)
        } else {
            layers::avgpool_backward(&xt, k, stride, &rt)
        }
        .unwrap();
        let numeric = numeric_grad(&x, |p| dot(&pool(p, (c, h, w), k, stride, max).0, &r));
        rel_err(&f64s(&g), &numeric)
    })
}

fn maxpool(instances: usize, s: u64) -> f64 {
    pool_check(instances, s, true)
}

fn avgpool(instances: usize, s: u64) -> f64 {
    pool_check(instances, s, false)
}

fn dense_check(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let (i, o) = (rng.gen_range(1..=12), rng.gen_range(1..=6));
        let x = uniform(rng, i, -1.0, 1.0);
        let w = uniform(rng, o * i, -1.0, 1.0);
        let b = uniform(rng, o, -1.0, 1.0);
        let r = uniform(rng, o, -1.0, 1.0);
        let g = layers::dense_backward(&tensor(&[i], &x), &tensor(&[o, i], &w), &tensor(&[o], &r)).unwrap();
        let analytic = [f64s(&g.input), f64s(&g.weights), f64s(&g.bias)].concat();
        let all = [x, w, b].concat();
        let numeric = numeric_grad(&all, |p| dot(&dense(&p[..i], &p[i..i + o * i], &p[i + o * i..]), &r));
        rel_err(&analytic, &numeric)
    })
}

fn softmax_check(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let n = rng.gen_range(2..=8);
        let x = uniform(rng, n, -3.0, 3.0);
        let r = uniform(rng, n, -1.0, 1.0);
        let probs = layers::softmax_forward(&tensor(&[n], &x));
        let g = layers::softmax_backward(&probs, &tensor(&[n], &r)).unwrap();
        rel_err(&f64s(&g), &numeric_grad(&x, |p| dot(&softmax(p), &r)))
    })
}

fn softmax_ce(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let n = rng.gen_range(2..=8);
        let label = rng.gen_range(0..n);
        let x = uniform(rng, n, -3.0, 3.0);
        let (_, g) = layers::softmax_cross_entropy(&tensor(&[n], &x), label).unwrap();
        rel_err(&f64s(&g), &numeric_grad(&x, |p| cross_entropy(p, label)))
    })
}

fn dropout_check(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let n = rng.gen_range(1..=40);
        let rate = rng.gen_range(0.1f32..0.7);
        let mask_seed: u64 = rng.gen();
        let x = uniform(rng, n, -1.0, 1.0);
        let r = uniform(rng, n, -1.0, 1.0);
        let g = layers::dropout_backward(&tensor(&[n], &r), rate, Mode::Train { seed: mask_seed });
        let numeric = numeric_grad(&x, |p| dot(&dropout(p, rate as f64, mask_seed), &r));
        rel_err(&f64s(&g), &numeric)
    })
}

fn content_loss(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=10));
        let f = uniform(rng, n * m, -1.0, 1.0);
        let p = uniform(rng, n * m, -1.0, 1.0);
        let (_, g) = losses::content_loss(&tensor(&[n, m], &f), &tensor(&[n, m], &p)).unwrap();
        rel_err(&f64s(&g), &numeric_grad(&f, |q| content(q, &p)))
    })
}

fn style_energy_check(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=10));
        let f = uniform(rng, n * m, -1.0, 1.0);
        let a = gram(&uniform(rng, n * m, -1.0, 1.0), n, m);
        let (_, g) = losses::style_energy(&tensor(&[n, m], &f), &tensor(&[n, n], &a)).unwrap();
        rel_err(&f64s(&g), &numeric_grad(&f, |q| style_energy(q, &a, n, m)))
    })
}

fn style_loss(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let shapes = [(rng.gen_range(1..=5), rng.gen_range(1..=8)), (rng.gen_range(1..=5), rng.gen_range(1..=8))];
        let w0 = rng.gen_range(0.1..0.9);
        let weights = BTreeMap::from([("a".to_string(), w0), ("b".to_string(), 1.0 - w0)]);
        let mut acts = BTreeMap::new();
        let mut refs = BTreeMap::new();
        let mut flat = Vec::new();
        let mut grams = Vec::new();
        for (tag, &(n, m)) in ["a", "b"].iter().zip(&shapes) {
            let f = uniform(rng, n * m, -1.0, 1.0);
            let r = uniform(rng, n * m, -1.0, 1.0);
            acts.insert(tag.to_string(), tensor(&[n, m], &f));
            refs.insert(tag.to_string(), tensor(&[n, m], &r));
            grams.push(gram(&r, n, m));
            flat.extend(f);
        }
        let target = losses::StyleTarget::from_activations(&ActivationSet::from(refs)).unwrap();
        let (_, g) = losses::style_loss(&ActivationSet::from(acts), &target, &weights).unwrap();
        let analytic = [f64s(&g["a"]), f64s(&g["b"])].concat();
        let split = shapes[0].0 * shapes[0].1;
        let numeric = numeric_grad(&flat, |q| {
            w0 * style_energy(&q[..split], &grams[0], shapes[0].0, shapes[0].1)
                + (1.0 - w0) * style_energy(&q[split..], &grams[1], shapes[1].0, shapes[1].1)
        });
        rel_err(&analytic, &numeric)
    })
}

fn tv_loss(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let (c, h, w) = loop {
            let d = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6));
            if d.1 * d.2 >= 2 {
                break d;
            }
        };
        let x = uniform(rng, c * h * w, 0.0, 1.0);
        let (_, g) = losses::tv_loss(&tensor(&[c, h, w], &x)).unwrap();
        rel_err(&f64s(&g), &numeric_grad(&x, |p| tv(p, (c, h, w))))
    })
}

const SIDE: usize = 8;

fn total_loss(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let shape = [3, SIDE, SIDE];
        let net = Network::init(NetworkSpec::desk_scale(), &shape, rng.gen()).unwrap();
        let cfg = TransferConfig {
            weights: LossWeights {
                content_weight: rng.gen_range(1e-4..1.0),
                style_weight: rng.gen_range(0.1..100.0),
                tv_weight: rng.gen_range(1e-6..1e-3),
                ..TransferConfig::default().weights
            },
            ..TransferConfig::default()
        };
        let content_img = tensor(&shape, &uniform(rng, 3 * SIDE * SIDE, 0.0, 1.0));
        let reference = tensor(&shape, &uniform(rng, 3 * SIDE * SIDE, 0.0, 1.0));
        let x = uniform(rng, 3 * SIDE * SIDE, 0.0, 1.0);
        let targets = transfer::prepare_targets(&net, &content_img, &reference, &cfg).unwrap();
        let (_, g) = losses::total_loss(&tensor(&shape, &x), &net, &targets.content, &targets.style, &cfg.weights).unwrap();

        let spec = net.spec().clone();
        let params = params64(net.params());
        let p_target = f64s(&targets.content.features);
        let style: Vec<(String, Vec<f64>, f64)> = targets
            .style
            .layers
            .iter()
            .map(|(tag, l)| (tag.clone(), f64s(&l.gram), cfg.weights.layer_weights[tag]))
            .collect();
        let wts = cfg.weights.clone();
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = smooth_numeric_grad_at(&x, &coords, |img| {
            let trace = forward(&spec, &params, img, (SIDE, SIDE), None);
            let (fc, _, _) = at_tag(&spec, &trace, &cfg.content_tag);
            let mut total = wts.content_weight * content(fc, &p_target);
            for (tag, a, wl) in &style {
                let (f, n, m) = at_tag(&spec, &trace, tag);
                total += wts.style_weight * wl * style_energy(f, a, n, m);
            }
            let total = total + wts.tv_weight * tv(img, (3, SIDE, SIDE));
            (total, kink_pattern(&spec, &trace))
        });
        rel_err_smooth(&f64s(&g), &numeric)
    })
}

/// Classifier parameter gradients in training mode (dropout active) on a
/// random subset of coordinates per instance.
fn network_params(instances: usize, s: u64) -> f64 {
    worst(instances, s, |rng| {
        let classes = rng.gen_range(2..=4);
        let spec = classifier_spec(&NetworkSpec::desk_scale(), SIDE, classes, 0.5).unwrap();
        let net = Network::init(spec.clone(), &[3, SIDE, SIDE], rng.gen()).unwrap();
        let x = uniform(rng, 3 * SIDE * SIDE, 0.0, 1.0);
        let label = rng.gen_range(0..classes);
        let mask_seed: u64 = rng.gen();
        let mode = Mode::Train { seed: mask_seed };
        let last = spec.layers.len() - 1;
        let trace = net.forward_trace(&tensor(&[3, SIDE, SIDE], &x), mode, last).unwrap();
        let (_, gl) = layers::softmax_cross_entropy(trace.last().unwrap(), label).unwrap();
        let grads = net.backward_params(&trace, &gl, mode).unwrap();

        // Flatten (layer, weights|bias, index) coordinates.
        let mut params = params64(net.params());
        let mut coords = Vec::new();
        let mut analytic = Vec::new();
        for (li, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                for (which, t) in [&g.weights, &g.bias].into_iter().enumerate() {
                    for (i, &v) in t.data().iter().enumerate() {
                        coords.push((li, which, i));
                        analytic.push(v as f64);
                    }
                }
            }
        }
        let mut picks: Vec<usize> = (0..coords.len()).collect();
        picks.shuffle(rng);
        picks.truncate(40);
        picks.sort_unstable();
        let mut numeric = Vec::with_capacity(picks.len());
        for &pi in &picks {
            let (li, which, i) = coords[pi];
            let mut eval = |delta: f64| {
                let (w, b) = params[li].as_mut().unwrap();
                let slot = if which == 0 { &mut w[i] } else { &mut b[i] };
                let x0 = *slot;
                *slot = x0 + delta;
                let trace = forward(&spec, &params, &x, (SIDE, SIDE), Some(mask_seed));
                let (w, b) = params[li].as_mut().unwrap();
                let slot = if which == 0 { &mut w[i] } else { &mut b[i] };
                *slot = x0;
                (cross_entropy(&trace.last().unwrap().1, label), kink_pattern(&spec, &trace))
            };
            let (_, at) = eval(0.0);
            let ((up, pu), (down, pd)) = (eval(EPS), eval(-EPS));
            numeric.push((pu == at && pd == at).then(|| (up - down) / (2.0 * EPS)));
        }
        let analytic: Vec<f64> = picks.iter().map(|&pi| analytic[pi]).collect();
        rel_err_smooth(&analytic, &numeric)
    })
}
