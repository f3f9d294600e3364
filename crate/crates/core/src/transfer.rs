//! Iterative pixel-space style transfer.
//!
//! One "iteration" is `steps_per_iteration` optimizer steps on the total
//! loss; snapshots are taken at the end of the scheduled iterations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, ContentTarget, LossBreakdown, LossWeights, StyleTarget};
use crate::network::Network;
use crate::optim::{Optimizer, OptimizerKind};
use crate::parallel::{self, Execution};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    WhiteNoise,
    ContentCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub weights: LossWeights,
    pub style_tags: Vec<String>,
    pub content_tag: String,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub snapshot_iterations: BTreeSet<usize>,
    pub optimizer: OptimizerKind,
    pub init: InitKind,
    pub seed: u64,
    pub clamp: [f32; 2],
}

impl Default for TransferConfig {
    fn default() -> Self {
        let style_tags = vec!["c1".to_string(), "c3".to_string()];
        TransferConfig {
            weights: LossWeights::uniform(&style_tags),
            style_tags,
            content_tag: "c4".into(),
            iterations: 7,
            steps_per_iteration: 50,
            snapshot_iterations: BTreeSet::from([1, 3, 5, 7]),
            optimizer: OptimizerKind::adam(0.02),
            init: InitKind::WhiteNoise,
            seed: 0,
            clamp: [0.0, 1.0],
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.steps_per_iteration == 0 {
            return Err(Error::InvalidConfig("iterations and steps_per_iteration must be at least 1".into()));
        }
        if let Some(&bad) = self
            .snapshot_iterations
            .iter()
            .find(|&&i| i == 0 || i > self.iterations)
        {
            return Err(Error::InvalidConfig(format!(
                "snapshot iteration {bad} outside 1..={}",
                self.iterations
            )));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        let tags: BTreeSet<&str> = self.style_tags.iter().map(String::as_str).collect();
        let weighted: BTreeSet<&str> = self.weights.layer_weights.keys().map(String::as_str).collect();
        if tags != weighted {
            return Err(Error::InvalidConfig(format!(
                "style tags {tags:?} do not match layer weights {weighted:?}"
            )));
        }
        let [lo, hi] = self.clamp;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!("clamp range [{lo}, {hi}] must lie inside [0, 1]")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferTargets {
    pub content: ContentTarget,
    pub style: StyleTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    pub image: Tensor,
    pub snapshots: BTreeMap<usize, Tensor>,
    pub trace: Vec<LossBreakdown>,
    pub seed: u64,
}

impl TransferResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(0.0, |b| b.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(0.0, |b| b.total)
    }
}

/// Content features of `content_image` and Gram statistics of
/// `reference_image` at the configured layers.
pub fn prepare_targets(
    net: &Network,
    content_image: &Tensor,
    reference_image: &Tensor,
    config: &TransferConfig,
) -> Result<TransferTargets> {
    let content_acts = net.forward_record(content_image, &[config.content_tag.as_str()])?;
    let style_tags: Vec<&str> = config.style_tags.iter().map(String::as_str).collect();
    let style_acts = net.forward_record(reference_image, &style_tags)?;
    Ok(TransferTargets {
        content: ContentTarget {
            tag: config.content_tag.clone(),
            features: content_acts.get(&config.content_tag)?.clone(),
            image: content_image.clone(),
        },
        style: StyleTarget::from_activations(&style_acts)?,
    })
}

fn initial_image(targets: &TransferTargets, config: &TransferConfig) -> Tensor {
    let source = &targets.content.image;
    let mut image = match config.init {
        InitKind::ContentCopy => source.clone(),
        InitKind::WhiteNoise => Tensor::uniform(source.shape(), 0.0, 1.0, &mut seed::rng(config.seed)),
    };
    image.clamp_in_place(config.clamp[0], config.clamp[1]);
    image
}

/// Minimizes the total loss from the configured starting image.
pub fn synthesize(net: &Network, targets: &TransferTargets, config: &TransferConfig) -> Result<TransferResult> {
    config.validate()?;
    let [lo, hi] = config.clamp;
    let mut image = initial_image(targets, config);
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut trace = Vec::with_capacity(config.iterations * config.steps_per_iteration);
    let mut snapshots = BTreeMap::new();
    for iteration in 1..=config.iterations {
        for _ in 0..config.steps_per_iteration {
            let (loss, grad) = losses::total_loss(&image, net, &targets.content, &targets.style, &config.weights)?;
            if !loss.total.is_finite() || !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at step {}",
                    trace.len()
                )));
            }
            trace.push(loss);
            optimizer.tick();
            optimizer.update(0, image.data_mut(), grad.data());
            image.clamp_in_place(lo, hi);
        }
        if config.snapshot_iterations.contains(&iteration) {
            snapshots.insert(iteration, image.clone());
        }
    }
    let result = TransferResult {
        image,
        snapshots,
        trace,
        seed: config.seed,
    };
    let (initial, last) = (result.initial_loss(), result.final_loss());
    // A loss that starts at zero has nothing to decrease.
    if initial > 0.0 && last >= initial {
        return Err(Error::StepSize { initial, last });
    }
    Ok(result)
}

/// Config for image `index` of a batch: same settings, derived seed.
pub fn job_config(config: &TransferConfig, index: usize) -> TransferConfig {
    TransferConfig {
        seed: seed::derive_seed(config.seed, index as u64),
        ..config.clone()
    }
}

/// Synthesizes every content image against one reference. The outer error
/// covers batch-wide failures; each entry carries its own outcome.
pub fn batch_synthesize(
    net: &Network,
    content_images: &[Tensor],
    reference_image: &Tensor,
    config: &TransferConfig,
) -> Result<Vec<Result<TransferResult>>> {
    batch_synthesize_with(Execution::default(), net, content_images, reference_image, config)
}

pub fn batch_synthesize_with(
    exec: Execution,
    net: &Network,
    content_images: &[Tensor],
    reference_image: &Tensor,
    config: &TransferConfig,
) -> Result<Vec<Result<TransferResult>>> {
    if content_images.is_empty() {
        return Err(Error::InvalidConfig("batch_synthesize needs at least one content image".into()));
    }
    config.validate()?;
    let style_tags: Vec<&str> = config.style_tags.iter().map(String::as_str).collect();
    let style = StyleTarget::from_activations(&net.forward_record(reference_image, &style_tags)?)?;
    Ok(parallel::map(exec, content_images, |i, image| {
        let acts = net.forward_record(image, &[config.content_tag.as_str()])?;
        let targets = TransferTargets {
            content: ContentTarget {
                tag: config.content_tag.clone(),
                features: acts.get(&config.content_tag)?.clone(),
                image: image.clone(),
            },
            style: style.clone(),
        };
        synthesize(net, &targets, &job_config(config, i))
    }))
}
