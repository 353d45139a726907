use std::path::PathBuf;

use regce::harness::{
    expand_matrix, export_figure_data, files, run_experiment, run_experiment_matrix, AblationAxes, ExperimentConfig,
    Figure, MatrixSpec,
};
use regce::Error;

const TINY: &str = r#"{
  "dataset": {"synthetic": {"num_classes": 3, "n_train": 90, "n_test": 30, "shape": [3, 8, 8]}},
  "noise": {"kind": "symmetric", "rate": 0.4, "seed": 5},
  "train": {
    "model": {"kind": "micro_resnet", "stages": [[1, 4]], "input_shape": [3, 8, 8], "num_classes": 3, "stem_stride": 2},
    "schedule": {"kind": "sharp", "total_epochs": 3, "plateau": {"patience": 1, "max_trigger_epoch": 1}},
    "batch_size": 30, "epochs": 3,
    "weak": {"kind": "weak", "crop_padding": 2}, "strong": {"kind": "strong", "crop_padding": 2}
  }
}"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_json(TINY).unwrap()
}

#[test]
fn unknown_keys_rejected_at_every_level() {
    for (from, to) in [
        ("\"noise\"", "\"nosie\""),
        ("\"batch_size\"", "\"batchsize\""),
        ("\"patience\"", "\"patients\""),
        ("\"n_train\"", "\"ntrain\""),
        ("\"stem_stride\"", "\"stride\""),
    ] {
        let text = TINY.replace(from, to);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))), "{to} accepted");
    }
}

#[test]
fn seed_offsets_noise_seed() {
    let cfg = tiny().with_seed(3);
    assert_eq!(cfg.train.seed, 3);
    assert_eq!(cfg.noise.unwrap().seed, 8);
}

#[test]
fn ablation_expands_to_eight_cells() {
    let mut cfg = tiny();
    cfg.matrix = Some(MatrixSpec {
        seeds: vec![0, 1, 2],
        ablation: AblationAxes::full(),
        semi: vec![false],
        ..MatrixSpec::default()
    });
    let plans = expand_matrix(&cfg).unwrap();
    assert_eq!(plans.len(), 24);
    let mut cells: Vec<_> = plans.iter().map(|p| (p.lr_on, p.aug_on, p.ema_on)).collect();
    cells.dedup();
    assert_eq!(cells.len(), 8);
    for p in &plans {
        assert!(p.config.matrix.is_none());
        assert_eq!(p.config.train.ema.enabled, p.ema_on);
        assert_eq!(p.config.train.dual_view(), p.aug_on);
        assert_eq!(p.config.train.schedule.kind == regce::schedule::LrKind::Sharp, p.lr_on);
    }
}

#[test]
fn matrix_runs_summary_and_determinism() {
    let mut cfg = tiny();
    cfg.matrix = Some(MatrixSpec {
        noise_rates: vec![0.2, 0.4],
        seeds: vec![0, 1, 2],
        ..MatrixSpec::default()
    });
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (results, summary) = run_experiment_matrix(&cfg, a.path(), 2).unwrap();
    assert_eq!(results.len(), 6);
    assert_eq!(summary.len(), 2);
    assert!(results.iter().all(|r| r.outcome.is_ok()));
    for r in &results {
        for f in [files::CONFIG, files::METRICS, files::TIMING, files::FINAL] {
            assert!(r.dir.join(f).is_file(), "{} missing {f}", r.dir.display());
        }
        let echoed = std::fs::read_to_string(r.dir.join(files::CONFIG)).unwrap();
        assert_eq!(ExperimentConfig::from_json(&echoed).unwrap(), r.plan.config);
    }
    let text = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "run_id,noise_kind,noise_rate,lr_on,aug_on,ema_on,semi_on,seed_count,acc_mean,acc_std"
    );
    assert_eq!(text.lines().count(), 3);
    assert!(summary.iter().all(|r| r.seed_count == 3));

    // Single-threaded rerun reproduces the summary and metrics bit for bit.
    run_experiment_matrix(&cfg, b.path(), 1).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.path().join("summary.csv")).unwrap());
    for r in &results {
        let rel = r.dir.strip_prefix(a.path()).unwrap();
        let m1 = std::fs::read(r.dir.join(files::METRICS)).unwrap();
        let m2 = std::fs::read(b.path().join(rel).join(files::METRICS)).unwrap();
        assert_eq!(m1, m2);
    }
}

#[test]
fn failed_runs_are_recorded_and_matrix_continues() {
    let mut cfg = tiny();
    // Cifar-10 asymmetric noise needs ten classes, so these runs fail.
    cfg.matrix = Some(MatrixSpec {
        noise_kinds: vec![regce::noise::NoiseKind::Symmetric, regce::noise::NoiseKind::AsymmetricCifar10],
        ..MatrixSpec::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let (results, summary) = run_experiment_matrix(&cfg, dir.path(), 1).unwrap();
    assert_eq!(results.len(), 2);
    assert!(results[0].outcome.is_ok());
    assert!(results[1].outcome.is_err());
    assert!(results[1].dir.join(files::ERROR).is_file());
    assert_eq!(summary[1].seed_count, 0);
}

fn run_tiny(dir: &std::path::Path, edit: impl FnOnce(&mut ExperimentConfig)) -> PathBuf {
    let mut cfg = tiny();
    edit(&mut cfg);
    run_experiment(&cfg, dir, false).unwrap();
    dir.to_path_buf()
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn figure_exports() {
    let root = tempfile::tempdir().unwrap();
    let a = run_tiny(&root.path().join("const"), |c| c.train.schedule.kind = regce::schedule::LrKind::Constant);
    let b = run_tiny(&root.path().join("sharp"), |_| {});
    let out = root.path().join("out.csv");

    let rows = export_figure_data(&[a.clone(), b.clone()], Figure::Memorization, &out).unwrap();
    let (header, data) = read_csv(&out);
    assert_eq!(header, ["series", "epoch", "loss_clean", "loss_noisy"]);
    assert_eq!(rows, 2 * 3);
    assert_eq!(data.len(), rows);

    export_figure_data(&[a.clone()], Figure::Schedules, &out).unwrap();
    let (_, data) = read_csv(&out);
    assert!(data.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.1));

    for fig in [Figure::Generalization, Figure::AugmentCompare] {
        assert_eq!(export_figure_data(&[a.clone(), b.clone()], fig, &out).unwrap(), 6);
    }

    // No diagnostics were configured, so the sharpness column is absent.
    match export_figure_data(&[a], Figure::Sharpness, &out) {
        Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "sharpness_proxy"),
        other => panic!("expected MissingColumn, got {other:?}"),
    }
}

#[test]
fn figure_names_parse() {
    assert_eq!("augment-compare".parse::<Figure>().unwrap(), Figure::AugmentCompare);
    assert_eq!("memorization".parse::<Figure>().unwrap(), Figure::Memorization);
    assert!("loss".parse::<Figure>().is_err());
}
