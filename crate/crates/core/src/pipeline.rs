//! Composite dataset assembly: a fraction of one class is replaced by
//! style-transferred versions (or by real adverse-domain images) and the
//! result is written next to a JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::network::{Network, NetworkSpec};
use crate::parallel::{self, Execution};
use crate::seed;
use crate::tensor::Tensor;
use crate::transfer::{self, TransferConfig};
use crate::weights::WeightStore;

pub const MANIFEST_FILE: &str = "manifest.json";

const SELECT_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;
const TRANSFER_STREAM: u64 = 3;
const NETWORK_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Original,
    Styled,
    AdverseReal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub label: String,
    pub origin: Origin,
    /// Relative to the source root (or to the adverse pool).
    pub source: String,
    pub seed: Option<u64>,
}

/// A source image left out of the composite.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub source: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub ratio: f64,
    pub master_seed: u64,
    pub config_digest: String,
    pub target_class: Option<String>,
    #[serde(default)]
    pub skipped: Vec<SkippedEntry>,
    /// Directory the entry paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// All-original manifest over a labeled folder (`root/<class>/<image>`),
    /// read in place.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut entries = Vec::new();
        for (label, files) in scan_classes(root)? {
            for file in files {
                let rel = format!("{label}/{file}");
                entries.push(ManifestEntry {
                    path: rel.clone(),
                    label: label.clone(),
                    origin: Origin::Original,
                    source: rel,
                    seed: None,
                });
            }
        }
        Ok(DatasetManifest {
            entries,
            ratio: 0.0,
            master_seed: 0,
            config_digest: String::new(),
            target_class: None,
            skipped: Vec::new(),
            root: root.to_path_buf(),
        })
    }

    /// Reads `manifest.json` from a directory, or the given file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: file.clone(),
            source: e,
        })?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self) -> Result<PathBuf> {
        let file = self.root.join(MANIFEST_FILE);
        fs::write(&file, self.to_json()).map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn count(&self, label: &str, origin: Origin) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label == label && e.origin == origin)
            .count()
    }
}

/// Class directories and their image file names, both sorted.
pub fn scan_classes(root: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut classes = BTreeMap::new();
    for dir in read_dir_sorted(root)? {
        if dir.is_dir() {
            let label = file_name(&dir);
            classes.insert(label, image_files(&dir)?);
        }
    }
    Ok(classes)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && imageio::is_image_path(p))
        .map(|p| file_name(&p))
        .collect())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Number of images replaced out of `n`: `floor(ratio * n)`. The small
/// tolerance absorbs binary rounding in products such as `0.29 * 100`.
pub fn replacement_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Seeded Fisher–Yates selection of `k` out of `n` indices, returned sorted.
pub fn select_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let mut chosen = idx[..k.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPlan {
    pub source_root: PathBuf,
    pub target_class: String,
    pub references: Vec<PathBuf>,
    pub ratio: f64,
    pub transfer: TransferConfig,
    pub output_root: PathBuf,
    pub seed: u64,
    /// Side length images are resized to before synthesis.
    pub input_size: usize,
    pub network: NetworkSpec,
    /// STWB file; absent means seeded random initialization.
    pub weights: Option<PathBuf>,
    /// Real adverse-domain images used instead of synthesis.
    pub adverse_pool: Option<PathBuf>,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            source_root: PathBuf::new(),
            target_class: String::new(),
            references: Vec::new(),
            ratio: 0.2,
            transfer: TransferConfig::default(),
            output_root: PathBuf::new(),
            seed: 0,
            input_size: 16,
            network: NetworkSpec::desk_scale(),
            weights: None,
            adverse_pool: None,
        }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidConfig(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        if self.input_size == 0 {
            return Err(Error::InvalidConfig("input_size must be positive".into()));
        }
        let class_dir = self.source_root.join(&self.target_class);
        if self.target_class.is_empty() || !class_dir.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "target class directory {} does not exist",
                class_dir.display()
            )));
        }
        if self.adverse_pool.is_none() {
            if self.references.is_empty() {
                return Err(Error::InvalidConfig("plan needs at least one reference image".into()));
            }
            self.transfer.validate()?;
        }
        Ok(())
    }

    /// The network used for synthesis.
    pub fn build_network(&self) -> Result<Network> {
        match &self.weights {
            Some(path) => Network::from_store(self.network.clone(), &WeightStore::load(path)?),
            None => Network::init(
                self.network.clone(),
                &[self.network.input_channels, self.input_size, self.input_size],
                seed::derive_seed(self.seed, NETWORK_STREAM),
            ),
        }
    }

    /// Transfer settings with the seed derived from the master seed.
    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            seed: seed::derive_seed(self.seed, TRANSFER_STREAM),
            ..self.transfer.clone()
        }
    }

    fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.transfer_config().digest());
        h.update(serde_json::to_vec(&self.network).expect("spec serializes"));
        h.update(self.input_size.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Source {
    label: String,
    file: String,
    path: PathBuf,
}

impl Source {
    fn rel(&self) -> String {
        format!("{}/{}", self.label, self.file)
    }
}

/// Splits the target class into decodable images and skipped ones, and
/// lists every other class unchanged.
fn collect_sources(plan: &AugmentationPlan) -> Result<(Vec<Source>, Vec<Source>, Vec<SkippedEntry>)> {
    let mut target = Vec::new();
    let mut others = Vec::new();
    let mut skipped = Vec::new();
    for (label, files) in scan_classes(&plan.source_root)? {
        for file in files {
            let src = Source {
                path: plan.source_root.join(&label).join(&file),
                label: label.clone(),
                file,
            };
            match decode_check(&src.path) {
                Ok(()) if src.label == plan.target_class => target.push(src),
                Ok(()) => others.push(src),
                Err(reason) => skipped.push(SkippedEntry {
                    source: src.rel(),
                    reason,
                }),
            }
        }
    }
    if target.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "target class `{}` has no readable images",
            plan.target_class
        )));
    }
    Ok((target, others, skipped))
}

fn decode_check(path: &Path) -> std::result::Result<(), String> {
    imageio::load_image(path).map(drop).map_err(|e| e.to_string())
}

fn copy_into(from: &Path, out_root: &Path, rel: &str) -> Result<()> {
    let to = out_root.join(rel);
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::copy(from, &to).map_err(|e| Error::io(from, e))?;
    Ok(())
}

fn stem(file: &str) -> &str {
    Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or(file)
}

/// Path of the styled replacement for `label/file`.
pub fn styled_name(label: &str, file: &str) -> String {
    format!("{label}/styled-{}.png", stem(file))
}

fn finish(plan: &AugmentationPlan, mut entries: Vec<ManifestEntry>, skipped: Vec<SkippedEntry>) -> Result<DatasetManifest> {
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if let Some(w) = entries.windows(2).find(|w| w[0].path == w[1].path) {
        return Err(Error::InvalidConfig(format!("duplicate output path {}", w[0].path)));
    }
    let manifest = DatasetManifest {
        entries,
        ratio: plan.ratio,
        master_seed: plan.seed,
        config_digest: plan.digest(),
        target_class: Some(plan.target_class.clone()),
        skipped,
        root: plan.output_root.clone(),
    };
    manifest.save()?;
    Ok(manifest)
}

fn original_entries<'a>(sources: impl IntoIterator<Item = &'a Source>, out_root: &Path) -> Result<Vec<ManifestEntry>> {
    sources
        .into_iter()
        .map(|s| {
            copy_into(&s.path, out_root, &s.rel())?;
            Ok(ManifestEntry {
                path: s.rel(),
                label: s.label.clone(),
                origin: Origin::Original,
                source: s.rel(),
                seed: None,
            })
        })
        .collect()
}

/// Synthesizes the styled replacement for one source image.
pub fn synthesize_replacement(
    net: &Network,
    plan: &AugmentationPlan,
    content_path: &Path,
    reference: &Tensor,
    seed: u64,
) -> Result<transfer::TransferResult> {
    let s = plan.input_size;
    let content = imageio::resize_bilinear(&imageio::load_image(content_path)?, s, s)?;
    let cfg = TransferConfig {
        seed,
        ..plan.transfer.clone()
    };
    let targets = transfer::prepare_targets(net, &content, reference, &cfg)?;
    transfer::synthesize(net, &targets, &cfg)
}

fn load_references(plan: &AugmentationPlan) -> Result<Vec<Tensor>> {
    let s = plan.input_size;
    plan.references
        .iter()
        .map(|p| imageio::resize_bilinear(&imageio::load_image(p)?, s, s))
        .collect()
}

/// Replaces `floor(ratio * N)` target-class images with their style-transfer
/// composites and copies everything else byte for byte.
pub fn build_composite(plan: &AugmentationPlan) -> Result<DatasetManifest> {
    build_composite_with(Execution::default(), plan)
}

pub fn build_composite_with(exec: Execution, plan: &AugmentationPlan) -> Result<DatasetManifest> {
    plan.validate()?;
    let net = plan.build_network()?;
    let references = load_references(plan)?;
    build_composite_snapshots(exec, plan, &net, &references, &[])?
        .pop()
        .ok_or_else(|| Error::InvalidConfig("composite produced no output".into()))
}

/// Shared body of [`build_composite_with`] and the iteration ablation. With
/// an empty `roots` it writes the final images to `plan.output_root`;
/// otherwise it writes one composite per `(iteration, root)` from the
/// snapshots of a single synthesis run per image.
pub(crate) fn build_composite_snapshots(
    exec: Execution,
    plan: &AugmentationPlan,
    net: &Network,
    references: &[Tensor],
    roots: &[(usize, PathBuf)],
) -> Result<Vec<DatasetManifest>> {
    let (target, others, skipped) = collect_sources(plan)?;
    let k = replacement_count(plan.ratio, target.len());
    let chosen = select_indices(target.len(), k, seed::derive_seed(plan.seed, SELECT_STREAM));
    let cfg = plan.transfer_config();
    let picked: Vec<&Source> = chosen.iter().map(|&i| &target[i]).collect();
    let results = parallel::map(exec, &picked, |j, src| {
        let job_seed = transfer::job_config(&cfg, j).seed;
        let reference = &references[j % references.len()];
        synthesize_replacement(net, plan, &src.path, reference, job_seed).map(|r| (job_seed, r))
    });
    let mut styled = Vec::with_capacity(results.len());
    for r in results {
        styled.push(r?);
    }

    let outputs: Vec<(Option<usize>, PathBuf)> = if roots.is_empty() {
        vec![(None, plan.output_root.clone())]
    } else {
        roots.iter().map(|(it, root)| (Some(*it), root.clone())).collect()
    };
    let kept: Vec<&Source> = target
        .iter()
        .enumerate()
        .filter(|(i, _)| chosen.binary_search(i).is_err())
        .map(|(_, s)| s)
        .collect();
    let mut manifests = Vec::with_capacity(outputs.len());
    for (iteration, root) in outputs {
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut entries = original_entries(&others, &root)?;
        entries.extend(original_entries(kept.iter().copied(), &root)?);
        for (src, (job_seed, result)) in picked.iter().zip(&styled) {
            let image = match iteration {
                None => &result.image,
                Some(it) => result.snapshots.get(&it).ok_or_else(|| {
                    Error::InvalidConfig(format!("iteration {it} was not snapshotted"))
                })?,
            };
            let rel = styled_name(&src.label, &src.file);
            imageio::save_image(image, root.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                label: src.label.clone(),
                origin: Origin::Styled,
                source: src.rel(),
                seed: Some(*job_seed),
            });
        }
        let sub = AugmentationPlan {
            output_root: root.clone(),
            transfer: match iteration {
                Some(it) => TransferConfig {
                    iterations: it,
                    snapshot_iterations: BTreeSet::from([it]),
                    ..plan.transfer.clone()
                },
                None => plan.transfer.clone(),
            },
            ..plan.clone()
        };
        manifests.push(finish(&sub, entries, skipped.clone())?);
    }
    Ok(manifests)
}

/// Like [`build_composite`], but the replacements are drawn without
/// replacement from the real adverse-domain pool in `plan.adverse_pool`.
pub fn build_real_composite(plan: &AugmentationPlan) -> Result<DatasetManifest> {
    plan.validate()?;
    let pool_dir = plan
        .adverse_pool
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("plan has no adverse_pool directory".into()))?;
    let (target, others, mut skipped) = collect_sources(plan)?;
    let mut pool = Vec::new();
    for file in image_files(pool_dir)? {
        let path = pool_dir.join(&file);
        match decode_check(&path) {
            Ok(()) => pool.push((file, path)),
            Err(reason) => skipped.push(SkippedEntry { source: file, reason }),
        }
    }
    let k = replacement_count(plan.ratio, target.len());
    if pool.len() < k {
        return Err(Error::InsufficientPool {
            needed: k,
            available: pool.len(),
        });
    }
    let chosen = select_indices(target.len(), k, seed::derive_seed(plan.seed, SELECT_STREAM));
    let drawn = select_indices(pool.len(), k, seed::derive_seed(plan.seed, POOL_STREAM));

    let root = &plan.output_root;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let kept: Vec<&Source> = target
        .iter()
        .enumerate()
        .filter(|(i, _)| chosen.binary_search(i).is_err())
        .map(|(_, s)| s)
        .collect();
    let mut entries = original_entries(&others, root)?;
    entries.extend(original_entries(kept.iter().copied(), root)?);
    for &p in &drawn {
        let (file, path) = &pool[p];
        let rel = format!("{}/adverse-{file}", plan.target_class);
        copy_into(path, root, &rel)?;
        entries.push(ManifestEntry {
            path: rel,
            label: plan.target_class.clone(),
            origin: Origin::AdverseReal,
            source: file.clone(),
            seed: None,
        });
    }
    finish(plan, entries, skipped)
}
