//! Classifier training and TP/FP evaluation over repeated seeded runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, AugmentOp};
use crate::layers::{self, LayerKind, Mode};
use crate::network::{Layer, Network, NetworkSpec, Params};
use crate::optim::{Optimizer, OptimizerKind};
use crate::parallel::{self, Execution};
use crate::pipeline::{self, AugmentationPlan, DatasetManifest};
use crate::seed;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub dropout: f32,
    pub batch_size: usize,
    pub runs: usize,
    pub seed: u64,
    pub augment_ops: Vec<AugmentOp>,
    pub validation_fraction: f64,
    pub input_size: usize,
    pub extractor: NetworkSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dropout: 0.5,
            batch_size: 16,
            runs: 20,
            seed: 0,
            augment_ops: AugmentOp::ALL.to_vec(),
            validation_fraction: 0.2,
            input_size: 16,
            extractor: NetworkSpec::desk_scale(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(1..=10).contains(&self.epochs) {
            return bad(format!("epochs must be in 1..=10, got {}", self.epochs));
        }
        if self.runs == 0 || self.batch_size == 0 || self.input_size == 0 {
            return bad("runs, batch_size and input_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> OptimizerKind {
        OptimizerKind::Adam {
            step: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Extractor followed by global average pooling, dropout and a dense layer.
/// Softmax is applied on the logits by the loss and by [`Classifier::probabilities`].
pub fn classifier_spec(extractor: &NetworkSpec, input_size: usize, classes: usize, dropout: f32) -> Result<NetworkSpec> {
    let chain = extractor.shape_chain(&[extractor.input_channels, input_size, input_size])?;
    let last = chain.last().ok_or_else(|| Error::InvalidConfig("extractor has no layers".into()))?;
    let (h, w) = (last[1], last[2]);
    if h != w {
        return Err(Error::InvalidConfig(format!("extractor output {h}x{w} is not square")));
    }
    let mut spec = extractor.clone();
    spec.layers.extend([
        Layer::new("gap", LayerKind::AvgPool { k: h, stride: h }),
        Layer::new("flatten", LayerKind::Flatten),
        Layer::new("dropout", LayerKind::Dropout { rate: dropout }),
        Layer::new("logits", LayerKind::Dense { out_features: classes }),
    ]);
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassifierMeta {
    classes: Vec<String>,
    input_size: usize,
    spec: NetworkSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub network: Network,
    pub classes: Vec<String>,
    pub input_size: usize,
}

impl Classifier {
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let last = self.network.spec().layers.len() - 1;
        Ok(self.network.forward_trace(image, Mode::Eval, last)?.pop().expect("trace is non-empty"))
    }

    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        Ok(layers::softmax_forward(&self.logits(image)?))
    }

    /// Index of the highest score, first on ties.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.logits(image)?.argmax())
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidConfig(format!("classifier has no class `{name}` (knows {:?})", self.classes)))
    }

    /// Writes `model.json` and `weights.stwb` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ClassifierMeta {
            classes: self.classes.clone(),
            input_size: self.input_size,
            spec: self.network.spec().clone(),
        };
        let path = dir.join("model.json");
        let json = serde_json::to_string_pretty(&meta).expect("model metadata serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        self.network.to_store().save(dir.join("weights.stwb"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ClassifierMeta = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
        let store = WeightStore::load(dir.join("weights.stwb"))?;
        Ok(Classifier {
            network: Network::from_store(meta.spec, &store)?,
            classes: meta.classes,
            input_size: meta.input_size,
        })
    }
}

/// Decoded images with label indices into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub classes: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn load(manifest: &DatasetManifest, input_size: usize) -> Result<Self> {
        let classes = manifest.classes();
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let img = imageio::load_image(manifest.resolve(e))?;
            images.push(imageio::resize_bilinear(&img, input_size, input_size)?);
            labels.push(classes.binary_search(&e.label).expect("label comes from manifest"));
        }
        Ok(LabeledImages { classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub history: Vec<EpochStats>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
}

/// Trains on `manifest` with the run seed derived from `(cfg.seed, run)`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, run: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = LabeledImages::load(manifest, cfg.input_size)?;
    train_on(&data, cfg, seed::derive_seed(cfg.seed, run as u64))
}

fn accuracy(clf: &Classifier, data: &LabeledImages, idx: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for &i in idx {
        if clf.predict(&data.images[i])? == data.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len().max(1) as f64)
}

fn pick_op(ops: &[AugmentOp], rng: &mut impl Rng) -> Option<AugmentOp> {
    // Identity is one of the choices.
    let k = rng.gen_range(0..=ops.len());
    ops.get(k).copied()
}

/// Mini-batch cross-entropy training with a seeded train/validation split.
/// Keeps the weights of the epoch with the best validation accuracy.
pub fn train_on(data: &LabeledImages, cfg: &TrainConfig, run_seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.classes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training needs at least 2 classes, manifest has {:?}",
            data.classes
        )));
    }
    let spec = classifier_spec(&cfg.extractor, cfg.input_size, data.classes.len(), cfg.dropout)?;
    let shape = [spec.input_channels, cfg.input_size, cfg.input_size];
    let mut clf = Classifier {
        network: Network::init(spec, &shape, seed::derive_seed(run_seed, INIT_STREAM))?,
        classes: data.classes.clone(),
        input_size: cfg.input_size,
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive_seed(run_seed, SPLIT_STREAM)));
    let n_val = pipeline::replacement_count(cfg.validation_fraction, data.len()).min(data.len() - 1);
    let (val, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let last = clf.network.spec().layers.len() - 1;
    let mut optimizer = Optimizer::new(cfg.optimizer());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Option<Params>>)> = None;
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let epoch_seed = seed::derive_seed(seed::derive_seed(run_seed, EPOCH_STREAM), epoch as u64);
        let mut rng = seed::rng(epoch_seed);
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Params>> = vec![None; last + 1];
            for (pos, &i) in batch.iter().enumerate() {
                let image = match pick_op(&cfg.augment_ops, &mut rng) {
                    Some(op) => imageio::traditional_augment(&data.images[i], op),
                    None => data.images[i].clone(),
                };
                let mode = Mode::Train {
                    seed: seed::derive_seed(seed::derive_seed(run_seed, step), pos as u64),
                };
                let trace = clf.network.forward_trace(&image, mode, last)?;
                let logits = trace.last().expect("trace is non-empty");
                let (loss, grad) = layers::softmax_cross_entropy(logits, data.labels[i])?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite training loss at step {step}")));
                }
                loss_sum += loss;
                hits += usize::from(logits.argmax() == data.labels[i]);
                let grads = clf.network.backward_params(&trace, &grad, mode)?;
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            a.weights.axpy(1.0, &g.weights)?;
                            a.bias.axpy(1.0, &g.bias)?;
                        }
                        (None, g) => *a = g,
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            optimizer.tick();
            for (slot, (p, g)) in clf.network.params_mut().iter_mut().zip(&acc).enumerate() {
                if let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) {
                    let gw: Vec<f32> = g.weights.data().iter().map(|v| v * inv).collect();
                    let gb: Vec<f32> = g.bias.data().iter().map(|v| v * inv).collect();
                    optimizer.update(2 * slot, p.weights.data_mut(), &gw);
                    optimizer.update(2 * slot + 1, p.bias.data_mut(), &gb);
                }
            }
            step += 1;
        }
        let validation_accuracy = if val.is_empty() { None } else { Some(accuracy(&clf, data, val)?) };
        history.push(EpochStats {
            loss: loss_sum / train_idx.len() as f64,
            train_accuracy: hits as f64 / train_idx.len() as f64,
            validation_accuracy,
        });
        let score = validation_accuracy.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) || validation_accuracy.is_none() {
            best = Some((score, epoch + 1, clf.network.params().to_vec()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    clf.network.params_mut().clone_from_slice(&params);
    Ok(TrainOutcome {
        classifier: clf,
        history,
        best_epoch,
    })
}

/// Prediction counts on a test set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub positives: usize,
    pub true_positives: usize,
    pub negatives: usize,
    pub false_positives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    TruePositiveRate,
    FalsePositiveRate,
}

impl Metric {
    pub fn short(self) -> &'static str {
        match self {
            Metric::TruePositiveRate => "TP",
            Metric::FalsePositiveRate => "FP",
        }
    }
}

impl Confusion {
    pub fn rate(&self, metric: Metric) -> Result<f64> {
        let (hit, total, what) = match metric {
            Metric::TruePositiveRate => (self.true_positives, self.positives, "positive"),
            Metric::FalsePositiveRate => (self.false_positives, self.negatives, "negative"),
        };
        if total == 0 {
            return Err(Error::EmptyTestSet(format!("test set has no {what} images")));
        }
        Ok(hit as f64 / total as f64)
    }
}

/// Counts predictions of `positive_class` on every test image, in eval mode.
pub fn evaluate(clf: &Classifier, test: &LabeledImages, positive_class: &str) -> Result<Confusion> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet("test set has no images".into()));
    }
    let positive = clf.class_index(positive_class)?;
    let mut c = Confusion::default();
    for (img, &label) in test.images.iter().zip(&test.labels) {
        let predicted_positive = clf.predict(img)? == positive;
        if test.classes[label] == positive_class {
            c.positives += 1;
            c.true_positives += usize::from(predicted_positive);
        } else {
            c.negatives += 1;
            c.false_positives += usize::from(predicted_positive);
        }
    }
    Ok(c)
}

/// A held-out labeled folder and the rate reported on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub name: String,
    pub dir: PathBuf,
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: String,
    pub test_set: String,
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub per_run: Vec<f64>,
}

impl ReportCell {
    pub fn from_runs(model: &str, test_set: &str, metric: Metric, per_run: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_run);
        ReportCell {
            model: model.into(),
            test_set: test_set.into(),
            metric,
            mean,
            std,
            per_run,
        }
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub positive_class: String,
    pub runs: usize,
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    pub fn cell(&self, model: &str, test_set: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.model == model && c.test_set == test_set)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned table: one row per test set, one column per model, cells
    /// `mean±std`.
    pub fn table(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        let mut rows: Vec<(&str, Metric)> = Vec::new();
        for c in &self.cells {
            if !models.contains(&c.model.as_str()) {
                models.push(&c.model);
            }
            if !rows.iter().any(|(t, _)| *t == c.test_set) {
                rows.push((&c.test_set, c.metric));
            }
        }
        let labels: Vec<String> = rows.iter().map(|(t, m)| format!("{t} ({})", m.short())).collect();
        let first = labels.iter().map(String::len).max().unwrap_or(0).max("Test set".len());
        let mut cols: Vec<Vec<String>> = models
            .iter()
            .map(|m| {
                rows.iter()
                    .map(|(t, _)| {
                        self.cell(m, t)
                            .map_or("-".to_string(), |c| format!("{:.3}±{:.3}", c.mean, c.std))
                    })
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = models
            .iter()
            .zip(&cols)
            .map(|(m, col)| col.iter().map(|s| s.chars().count()).chain([m.len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", "Test set");
        for (m, w) in models.iter().zip(&widths) {
            let _ = write!(out, "  {m:>w$}");
        }
        out.push('\n');
        for (r, label) in labels.iter().enumerate() {
            let _ = write!(out, "{label:<first$}");
            for (col, w) in cols.iter_mut().zip(&widths) {
                let cell = std::mem::take(&mut col[r]);
                let pad = w.saturating_sub(cell.chars().count());
                let _ = write!(out, "  {}{cell}", " ".repeat(pad));
            }
            out.push('\n');
        }
        out
    }
}

/// A training set under a model name, e.g. `("A", vanilla manifest)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub manifest: DatasetManifest,
}

/// `cfg.runs` train/evaluate cycles per model. Run `r` of every model uses
/// the same seed, so identical manifests give identical cells.
pub fn run_experiment(
    exec: Execution,
    models: &[ModelSpec],
    tests: &[TestSet],
    positive_class: &str,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if models.is_empty() || tests.is_empty() {
        return Err(Error::InvalidConfig("experiment needs at least one model and one test set".into()));
    }
    let train_sets = models
        .iter()
        .map(|m| LabeledImages::load(&m.manifest, cfg.input_size))
        .collect::<Result<Vec<_>>>()?;
    let test_sets = tests
        .iter()
        .map(|t| LabeledImages::load(&DatasetManifest::scan(&t.dir)?, cfg.input_size))
        .collect::<Result<Vec<_>>>()?;
    let jobs = models.len() * cfg.runs;
    let rates = parallel::map_range(exec, jobs, |job| -> Result<Vec<f64>> {
        let (m, run) = (job / cfg.runs, job % cfg.runs);
        let outcome = train_on(&train_sets[m], cfg, seed::derive_seed(cfg.seed, run as u64))?;
        tests
            .iter()
            .zip(&test_sets)
            .map(|(t, data)| evaluate(&outcome.classifier, data, positive_class)?.rate(t.metric))
            .collect()
    });
    let mut per: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (job, r) in rates.into_iter().enumerate() {
        let r = r?;
        for (t, v) in r.into_iter().enumerate() {
            per.entry((job / cfg.runs, t)).or_default().push(v);
        }
    }
    let mut cells = Vec::new();
    for (t, test) in tests.iter().enumerate() {
        for (m, model) in models.iter().enumerate() {
            let runs = per.remove(&(m, t)).unwrap_or_default();
            cells.push(ReportCell::from_runs(&model.name, &test.name, test.metric, runs));
        }
    }
    Ok(EvalReport {
        positive_class: positive_class.into(),
        runs: cfg.runs,
        cells,
    })
}

/// One composite per iteration count, taken from the snapshots of a single
/// synthesis per image (snapshots do not perturb the optimization), each
/// trained and evaluated like a model of [`run_experiment`].
pub fn iteration_ablation(
    exec: Execution,
    iterations: &[usize],
    plan: &AugmentationPlan,
    tests: &[TestSet],
    positive_class: &str,
    cfg: &TrainConfig,
) -> Result<BTreeMap<usize, EvalReport>> {
    if iterations.is_empty() || iterations.contains(&0) {
        return Err(Error::InvalidConfig("ablation needs a non-empty list of positive iteration counts".into()));
    }
    let mut wanted = iterations.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let max = *wanted.last().expect("non-empty");
    let synth_plan = AugmentationPlan {
        transfer: crate::transfer::TransferConfig {
            iterations: max,
            snapshot_iterations: wanted.iter().copied().collect(),
            ..plan.transfer.clone()
        },
        ..plan.clone()
    };
    synth_plan.validate()?;
    let net = synth_plan.build_network()?;
    let s = plan.input_size;
    let references = plan
        .references
        .iter()
        .map(|p| imageio::resize_bilinear(&imageio::load_image(p)?, s, s))
        .collect::<Result<Vec<_>>>()?;
    let roots: Vec<(usize, PathBuf)> = wanted
        .iter()
        .map(|&it| (it, plan.output_root.join(format!("iter-{it:02}"))))
        .collect();
    let manifests = pipeline::build_composite_snapshots(exec, &synth_plan, &net, &references, &roots)?;
    let mut out = BTreeMap::new();
    for (&it, manifest) in wanted.iter().zip(manifests) {
        let model = ModelSpec {
            name: format!("{it} iterations"),
            manifest,
        };
        out.insert(it, run_experiment(exec, &[model], tests, positive_class, cfg)?);
    }
    Ok(out)
}
