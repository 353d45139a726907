use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use regce::data::{read_container, write_container, NoisyDataset};
use regce::harness::{apply_noise, export_figure_data, run_experiment, run_experiment_matrix, ExperimentConfig, Figure};
use regce::noise::noise_stats;

#[derive(Parser)]
#[command(name = "regce", version, about = "Train and evaluate noisy-label classifiers")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed; the noise seed is offset by it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Concurrent matrix runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training with the regularized recipe.
    Train,
    /// Warmup followed by the semi-supervised phase.
    TrainSemi,
    /// Every combination of the config's matrix axes, plus summary.csv.
    Matrix,
    /// Tidy CSV for one figure from finished run directories.
    Export {
        #[arg(long)]
        figure: Figure,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Prints shape, class balance and noise statistics.
    InspectDataset {
        /// A dataset container; without it the config's dataset is used.
        path: Option<PathBuf>,
    },
    /// Writes the config's dataset, with noise applied, as train/test containers.
    MakeDataset,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn describe(name: &str, ds: &NoisyDataset) {
    let [c, h, w] = ds.images.shape();
    println!("{name}: {} samples, {c}x{h}x{w}, {} classes", ds.len(), ds.num_classes);
    println!("  class histogram (observed labels): {:?}", ds.observed().class_histogram());
    match noise_stats(ds) {
        Some(s) => println!("  noise: {} corrupted, actual rate {:.4}", s.corrupted, s.actual_rate),
        None => println!("  noise: ground truth unknown"),
    }
}

fn train(cli: &Cli, semi: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let summary = run_experiment(&cfg, &cli.out, semi)?;
    println!("final accuracy {:.4}", summary.final_accuracy);
    if let Some(t) = summary.trigger_epoch {
        println!("learning-rate trigger at epoch {t}");
    }
    println!("run written to {}", cli.out.display());
    Ok(())
}

fn make_dataset(cli: &Cli, out: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let (train, test) = cfg.dataset.load()?;
    let train = apply_noise(&train, cfg.noise.as_ref())?;
    std::fs::create_dir_all(out)?;
    write_container(&out.join("train.rgds"), &train)?;
    write_container(&out.join("test.rgds"), &NoisyDataset::clean(&test))?;
    describe("train", &train);
    println!("containers written to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train => train(&cli, false),
        Command::TrainSemi => train(&cli, true),
        Command::Matrix => {
            let mut cfg = load_config(&cli)?;
            if let (Some(s), Some(m)) = (cli.seed, cfg.matrix.as_mut()) {
                m.seeds = vec![s];
            }
            let (results, summary) = run_experiment_matrix(&cfg, &cli.out, cli.threads)?;
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            for row in &summary {
                println!("{:<60} n={} acc {:.4} ± {:.4}", row.run_id, row.seed_count, row.acc_mean, row.acc_std);
            }
            if failed > 0 {
                bail!("{failed} of {} runs failed; see error.txt in their directories", results.len());
            }
            Ok(())
        }
        Command::Export { figure, runs } => {
            std::fs::create_dir_all(&cli.out)?;
            let name = serde_json::to_value(figure)?;
            let path = cli.out.join(format!("{}.csv", name.as_str().unwrap_or("figure")));
            let rows = export_figure_data(runs, *figure, &path)?;
            println!("{rows} rows written to {}", path.display());
            Ok(())
        }
        Command::InspectDataset { path: Some(p) } => {
            describe(&p.display().to_string(), &read_container(p)?);
            Ok(())
        }
        Command::InspectDataset { path: None } => {
            let cfg = load_config(&cli)?;
            let (train, test) = cfg.dataset.load()?;
            describe("train", &apply_noise(&train, cfg.noise.as_ref())?);
            describe("test", &NoisyDataset::clean(&test));
            Ok(())
        }
        Command::MakeDataset => make_dataset(&cli, &cli.out),
    }
}
