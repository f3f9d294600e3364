use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use styleaug::error::{Error, Result};
use styleaug::experiment::{self, ExperimentPlan};
use styleaug::harness::{self, Classifier, LabeledImages, Metric, TrainConfig};
use styleaug::imageio;
use styleaug::network::{Network, NetworkSpec};
use styleaug::parallel::Execution;
use styleaug::pipeline::{self, AugmentationPlan, DatasetManifest};
use styleaug::synthetic::BenchmarkConfig;
use styleaug::transfer::{self, TransferConfig};
use styleaug::weights::WeightStore;

#[derive(Parser)]
#[command(name = "styleaug", version, about = "Style-transfer data augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Style-transfer one image and write the final image plus snapshots.
    Transfer {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated iteration numbers.
        #[arg(long, value_delimiter = ',')]
        snapshots: Option<Vec<usize>>,
        /// TransferConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// STWB weights for the default network; random init otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        net_seed: u64,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// Build a composite dataset with a fraction of one class replaced.
    Augment {
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "class")]
        class: String,
        #[arg(long)]
        reference: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw replacements from real adverse-domain images instead.
        #[arg(long)]
        adverse_pool: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long)]
        sequential: bool,
    },
    /// Train a classifier on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// TP/FP counts of a trained classifier on a labeled folder.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        positive_class: String,
    },
    /// Repeated train/evaluate cycles for every model of a plan file.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic benchmark, its composites and an experiment plan.
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn transfer_config(path: Option<&PathBuf>) -> Result<TransferConfig> {
    path.map_or_else(|| Ok(TransferConfig::default()), |p| read_json(p))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transfer {
            content,
            reference,
            out,
            snapshots,
            config,
            seed,
            weights,
            net_seed,
            size,
        } => {
            let mut cfg = transfer_config(config.as_ref())?;
            if let Some(s) = snapshots {
                cfg.snapshot_iterations = s.into_iter().collect::<BTreeSet<_>>();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let spec = NetworkSpec::desk_scale();
            let net = match weights {
                Some(w) => Network::from_store(spec, &WeightStore::load(w)?)?,
                None => Network::init(spec, &[3, size, size], net_seed)?,
            };
            let load = |p: &Path| imageio::resize_bilinear(&imageio::load_image(p)?, size, size);
            let targets = transfer::prepare_targets(&net, &load(&content)?, &load(&reference)?, &cfg)?;
            let result = transfer::synthesize(&net, &targets, &cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            imageio::save_image(&result.image, out.join("final.png"))?;
            for (it, img) in &result.snapshots {
                imageio::save_image(img, out.join(format!("iter-{it:02}.png")))?;
            }
            write_json(&out.join("trace.json"), &result.trace)?;
            println!(
                "loss {:.6e} -> {:.6e} over {} steps",
                result.initial_loss(),
                result.final_loss(),
                result.trace.len()
            );
        }
        Command::Augment {
            src,
            class,
            reference,
            ratio,
            out,
            seed,
            adverse_pool,
            config,
            weights,
            size,
            sequential,
        } => {
            let plan = AugmentationPlan {
                source_root: src,
                target_class: class,
                references: reference,
                ratio,
                transfer: transfer_config(config.as_ref())?,
                output_root: out,
                seed,
                input_size: size,
                weights,
                adverse_pool,
                ..AugmentationPlan::default()
            };
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let manifest = if plan.adverse_pool.is_some() {
                pipeline::build_real_composite(&plan)?
            } else {
                pipeline::build_composite_with(exec, &plan)?
            };
            for s in &manifest.skipped {
                eprintln!("skipped {}: {}", s.source, s.reason);
            }
            println!(
                "{} entries, {} replaced, manifest at {}",
                manifest.entries.len(),
                manifest.entries.iter().filter(|e| e.origin != pipeline::Origin::Original).count(),
                manifest.root.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::Train {
            manifest,
            config,
            out,
            run,
        } => {
            let cfg: TrainConfig = config.map_or_else(|| Ok(TrainConfig::default()), |p| read_json(&p))?;
            let manifest = DatasetManifest::load(&manifest)?;
            let outcome = harness::train(&manifest, &cfg, run)?;
            outcome.classifier.save(&out)?;
            write_json(&out.join("history.json"), &outcome.history)?;
            println!("kept epoch {} of {}", outcome.best_epoch, outcome.history.len());
        }
        Command::Evaluate {
            model,
            test,
            positive_class,
        } => {
            let clf = Classifier::load(&model)?;
            let data = LabeledImages::load(&DatasetManifest::scan(&test)?, clf.input_size)?;
            let c = harness::evaluate(&clf, &data, &positive_class)?;
            let rate = |m| c.rate(m).ok();
            let report = serde_json::json!({
                "confusion": c,
                "true_positive_rate": rate(Metric::TruePositiveRate),
                "false_positive_rate": rate(Metric::FalsePositiveRate),
            });
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Experiment { plan, out } => {
            let report = ExperimentPlan::load(&plan)?.run()?;
            fs::write(&out, report.to_json()).map_err(|e| Error::io(&out, e))?;
            let table = report.table();
            let txt = out.with_extension("txt");
            fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
            print!("{table}");
        }
        Command::Benchmark { out, seed, per_class } => {
            let bench = BenchmarkConfig {
                seed,
                train_per_class: per_class,
                ..BenchmarkConfig::default()
            };
            let setup = experiment::prepare_desk(Execution::Parallel, &out, &bench, seed)?;
            let plan_path = out.join("experiment.json");
            setup.experiment_plan(&out, TrainConfig::default()).save(&plan_path)?;
            println!("benchmark written; run `styleaug experiment --plan {}`", plan_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
