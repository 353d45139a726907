//! Experiment plumbing shared by the command-line front end: JSON configs,
//! dataset preparation, run directories, experiment matrices and figure export.

mod export;
mod matrix;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use export::{export_figure_data, write_figure_data, Figure};
pub use matrix::{expand_matrix, run_experiment_matrix, summarize, AblationAxes, CellResult, MatrixSpec, RunPlan, SummaryRow};

use crate::data::{
    generate_synthetic_dataset, load_cifar_binary, read_container, CifarVariant, Dataset, NoisyDataset, SyntheticSpec,
};
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::noise::{inject_noise, NoiseSpec};
use crate::semi::{run_regce_semi, MixMatchSpec};
use crate::tensor::{write_checkpoint, Float, Precision};
use crate::train::{run_regce, EpochRecord, JsonlObserver, RunOutput, TrainConfig, TrainObserver};

/// Where the images come from. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Cifar {
        train: PathBuf,
        test: PathBuf,
        variant: CifarVariant,
    },
    Container {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Label noise injected into the training split; omitted means labels
    /// are used as loaded.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub mixmatch: Option<MixMatchSpec>,
    #[serde(default)]
    pub matrix: Option<MatrixSpec>,
}

impl ExperimentConfig {
    /// Strict parse: unknown keys anywhere are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.dataset.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if let Some(m) = &self.mixmatch {
            m.validate(self.train.model.input_shape)?;
        }
        if let Some(m) = &self.matrix {
            m.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a run seed: the training seed becomes `seed` and the noise
    /// seed is offset by it, so each seed also draws its own corruption.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.train.seed = seed;
        if let Some(n) = &mut cfg.noise {
            n.seed = n.seed.wrapping_add(seed);
        }
        cfg
    }
}

impl DatasetSpec {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Synthetic(_) => {}
            DatasetSpec::Cifar { train, test, .. } | DatasetSpec::Container { train, test } => {
                fix(train);
                fix(test);
            }
        }
    }

    /// Loads `(train, test)`. Container training sets keep their stored
    /// labels, ground truth and mask.
    pub fn load(&self) -> Result<(NoisyDataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic(spec) => {
                let (train, test) = generate_synthetic_dataset(spec)?;
                Ok((NoisyDataset::clean(&train), test))
            }
            DatasetSpec::Cifar { train, test, variant } => {
                let tr = load_cifar_binary(train, *variant)?;
                let te = load_cifar_binary(test, *variant)?;
                Ok((NoisyDataset::clean(&tr), te))
            }
            DatasetSpec::Container { train, test } => {
                let tr = read_container(train)?;
                let te = read_container(test)?;
                Ok((tr, te.observed()))
            }
        }
    }
}

/// Injects the configured noise into clean training data. The clean labels
/// are the stored ground truth when known, else the stored labels.
pub fn apply_noise(train: &NoisyDataset, noise: Option<&NoiseSpec>) -> Result<NoisyDataset> {
    match noise {
        None => Ok(train.clone()),
        Some(spec) => {
            let clean = Dataset {
                images: std::sync::Arc::clone(&train.images),
                labels: train.true_labels.clone().unwrap_or_else(|| train.noisy_labels.clone()),
                num_classes: train.num_classes,
                class_names: train.class_names.clone(),
            };
            inject_noise(&clean, spec)
        }
    }
}

/// Files written into a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const METRICS: &str = "metrics.jsonl";
    pub const TIMING: &str = "timing.json";
    pub const FINAL: &str = "final.ckpt";
    pub const FINAL_EMA: &str = "final_ema.ckpt";
    pub const TRIGGER: &str = "trigger.ckpt";
    pub const TRIGGER_EMA: &str = "trigger_ema.ckpt";
    pub const ERROR: &str = "error.txt";
}

/// Streams metrics into the run directory and checkpoints at the trigger.
struct DirObserver {
    dir: PathBuf,
    metrics: JsonlObserver<std::io::BufWriter<std::fs::File>>,
    seconds: Vec<f64>,
}

impl<T: Float> TrainObserver<T> for DirObserver {
    fn on_epoch(&mut self, record: &EpochRecord, seconds: f64) -> Result<()> {
        self.seconds.push(seconds);
        log::info!(
            "{} epoch {} lr {:.2e} loss {:.4} train {:.4} test {:.4} ema {:.4} ({seconds:.1}s)",
            self.dir.display(),
            record.epoch,
            record.lr,
            record.loss_all,
            record.acc_train,
            record.acc_test_online,
            record.acc_test_ema
        );
        <JsonlObserver<_> as TrainObserver<T>>::on_epoch(&mut self.metrics, record, seconds)
    }

    fn on_trigger(&mut self, _epoch: usize, online: &Model<T>, ema: Option<&EmaState<T>>) -> Result<()> {
        write_checkpoint(&self.dir.join(files::TRIGGER), &online.checkpoint())?;
        if let Some(e) = ema {
            write_checkpoint(&self.dir.join(files::TRIGGER_EMA), &e.ema_model()?.checkpoint())?;
        }
        Ok(())
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub records: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub trigger_epoch: Option<usize>,
}

fn run_typed<T: Float>(cfg: &ExperimentConfig, train: &NoisyDataset, test: &Dataset, dir: &Path, semi: bool) -> Result<RunSummary> {
    let path = dir.join(files::METRICS);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut obs = DirObserver {
        dir: dir.to_path_buf(),
        metrics: JsonlObserver {
            writer: std::io::BufWriter::new(file),
        },
        seconds: Vec::new(),
    };
    let out: RunOutput<T> = if semi {
        let mm = cfg
            .mixmatch
            .as_ref()
            .ok_or_else(|| Error::Config("semi-supervised run needs a `mixmatch` section".into()))?;
        run_regce_semi(&cfg.train, mm, train, test, &mut obs)?
    } else {
        run_regce(&cfg.train, train, test, &mut obs)?
    };
    write_checkpoint(&dir.join(files::FINAL), &out.model.checkpoint())?;
    if let Some(e) = &out.ema {
        write_checkpoint(&dir.join(files::FINAL_EMA), &e.ema_model()?.checkpoint())?;
    }
    let timing = serde_json::json!({ "epoch_seconds": obs.seconds });
    let tpath = dir.join(files::TIMING);
    std::fs::write(&tpath, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::io(&tpath, e))?;
    Ok(RunSummary {
        final_accuracy: out.log.last().map(|r| r.acc_test_ema).unwrap_or(f64::NAN),
        records: out.log.records,
        trigger_epoch: out.trigger_epoch,
    })
}

/// Runs one resolved configuration into `dir`, echoing the config first.
/// The training data must already carry the configured noise.
pub fn run_into_dir(cfg: &ExperimentConfig, train: &NoisyDataset, test: &Dataset, dir: &Path, semi: bool) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cpath = dir.join(files::CONFIG);
    std::fs::write(&cpath, cfg.to_json()).map_err(|e| Error::io(&cpath, e))?;
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg, train, test, dir, semi),
        Precision::F64 => run_typed::<f64>(cfg, train, test, dir, semi),
    }
}

/// Loads data, injects noise and runs a single experiment.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, semi: bool) -> Result<RunSummary> {
    let (train, test) = cfg.dataset.load()?;
    let train = apply_noise(&train, cfg.noise.as_ref())?;
    run_into_dir(cfg, &train, &test, dir, semi)
}
