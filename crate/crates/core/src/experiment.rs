//! End-to-end experiment wiring: the synthetic benchmark, the three training
//! sets (vanilla, styled, adverse-real), and plan files for the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{self, EvalReport, Metric, ModelSpec, TestSet, TrainConfig};
use crate::parallel::Execution;
use crate::pipeline::{self, AugmentationPlan, DatasetManifest};
use crate::synthetic::{self, BenchmarkConfig, BenchmarkLayout};
use crate::transfer::{InitKind, TransferConfig};

/// A model entry of a plan file: name and manifest location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSource {
    pub name: String,
    pub manifest: PathBuf,
}

/// `experiment --plan` input. Relative paths resolve against the plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub positive_class: String,
    pub models: Vec<ModelSource>,
    pub tests: Vec<TestSet>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub execution: Execution,
}

impl ExperimentPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut plan.models {
            m.manifest = base.join(&m.manifest);
        }
        for t in &mut plan.tests {
            t.dir = base.join(&t.dir);
        }
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("plan serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn run(&self) -> Result<EvalReport> {
        let models = self
            .models
            .iter()
            .map(|m| {
                Ok(ModelSpec {
                    name: m.name.clone(),
                    manifest: DatasetManifest::load(&m.manifest)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        harness::run_experiment(self.execution, &models, &self.tests, &self.positive_class, &self.train)
    }
}

/// Transfer settings for composites: default loss weights and schedule,
/// starting from the content image.
pub fn composite_transfer_config() -> TransferConfig {
    TransferConfig {
        init: InitKind::ContentCopy,
        ..TransferConfig::default()
    }
}

/// Everything needed to run the three-model comparison on the benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskSetup {
    pub layout: BenchmarkLayout,
    /// Plan of the styled composite (model B).
    pub plan: AugmentationPlan,
    pub models: Vec<ModelSpec>,
    pub tests: Vec<TestSet>,
}

pub const MODEL_NAMES: [&str; 3] = ["Original /A", "Styled (20%) /B", "Adverse (20%) /C"];

pub fn desk_tests(layout: &BenchmarkLayout) -> Vec<TestSet> {
    vec![
        TestSet {
            name: "Adverse".into(),
            dir: layout.adverse_test.clone(),
            metric: Metric::TruePositiveRate,
        },
        TestSet {
            name: "Negatives".into(),
            dir: layout.negatives_test.clone(),
            metric: Metric::FalsePositiveRate,
        },
    ]
}

/// Writes the benchmark under `root/data` and builds the styled and
/// adverse-real composites under `root/styled` and `root/adverse`.
pub fn prepare_desk(exec: Execution, root: &Path, bench: &BenchmarkConfig, seed: u64) -> Result<DeskSetup> {
    let layout = synthetic::write_benchmark(&root.join("data"), bench)?;
    let plan = AugmentationPlan {
        source_root: layout.train.clone(),
        target_class: synthetic::POSITIVE_CLASS.into(),
        references: vec![layout.reference.clone()],
        ratio: 0.2,
        transfer: composite_transfer_config(),
        output_root: root.join("styled"),
        seed,
        input_size: bench.size,
        ..AugmentationPlan::default()
    };
    let styled = pipeline::build_composite_with(exec, &plan)?;
    let adverse = pipeline::build_real_composite(&AugmentationPlan {
        adverse_pool: Some(layout.adverse_pool.clone()),
        output_root: root.join("adverse"),
        ..plan.clone()
    })?;
    let vanilla = DatasetManifest::scan(&layout.train)?;
    vanilla.save()?;
    let models = [vanilla, styled, adverse]
        .into_iter()
        .zip(MODEL_NAMES)
        .map(|(manifest, name)| ModelSpec {
            name: name.into(),
            manifest,
        })
        .collect();
    Ok(DeskSetup {
        tests: desk_tests(&layout),
        layout,
        plan,
        models,
    })
}

impl DeskSetup {
    /// Plan file equivalent of this setup, with paths relative to `root`.
    pub fn experiment_plan(&self, root: &Path, train: TrainConfig) -> ExperimentPlan {
        let rel = |p: &Path| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        ExperimentPlan {
            positive_class: synthetic::POSITIVE_CLASS.into(),
            models: self
                .models
                .iter()
                .map(|m| ModelSource {
                    name: m.name.clone(),
                    manifest: rel(&m.manifest.root),
                })
                .collect(),
            tests: self
                .tests
                .iter()
                .map(|t| TestSet {
                    dir: rel(&t.dir),
                    ..t.clone()
                })
                .collect(),
            train,
            execution: Execution::default(),
        }
    }
}

/// Pooled standard deviation of two equally sized samples.
pub fn pooled_std(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}
