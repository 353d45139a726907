use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regce::data::{generate_synthetic_dataset, Dataset, NoisyDataset, SyntheticSpec};
use regce::nn::{build_model, Model, ModelSpec};
use regce::noise::{inject_symmetric, NoiseKind, NoiseSpec};
use regce::schedule::{LrKind, LrScheduleSpec};
use regce::semi::{run_regce_semi, MixMatchSpec};
use regce::train::{evaluate, run_regce, NoObserver, TrainConfig};

fn small_data(rate: f64) -> (NoisyDataset, Dataset) {
    let spec = SyntheticSpec {
        n_train: 120,
        n_test: 60,
        shape: [3, 8, 8],
        num_classes: 3,
        ..SyntheticSpec::default()
    };
    let (train, test) = generate_synthetic_dataset(&spec).unwrap();
    let noise = NoiseSpec {
        kind: NoiseKind::Symmetric,
        rate,
        seed: 1,
    };
    (inject_symmetric(&train, &noise).unwrap(), test)
}

fn small_config(epochs: usize) -> TrainConfig {
    let model = ModelSpec {
        stem_stride: 2,
        ..ModelSpec::micro_resnet(vec![(1, 4), (1, 8)], [3, 8, 8], 3)
    };
    let mut cfg = TrainConfig::new(model, LrScheduleSpec::new(LrKind::Sharp, epochs));
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.weak.crop_padding = 2;
    cfg.strong.crop_padding = 2;
    cfg.schedule.plateau.patience = 1;
    cfg.schedule.second_decay_gap = 1;
    cfg
}

#[test]
fn zero_epochs_returns_initial_model() {
    let (train, test) = small_data(0.4);
    let cfg = small_config(0);
    let out = run_regce::<f32>(&cfg, &train, &test, &mut NoObserver).unwrap();
    assert!(out.log.is_empty());
    let fresh: Model<f32> = build_model(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(out.model.checkpoint().params, fresh.checkpoint().params);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (train, test) = small_data(0.0);
    let mut cfg = small_config(1);
    cfg.schedule.kind = LrKind::Constant;
    cfg.schedule.initial_lr = 0.0;
    let out = run_regce::<f32>(&cfg, &train, &test, &mut NoObserver).unwrap();
    let fresh: Model<f32> = build_model(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(out.model.checkpoint().params, fresh.checkpoint().params);
    let r = &out.log.records[0];
    assert!(r.loss_all > 0.0 && r.loss_clean.is_some() && r.loss_noisy.is_none());
}

#[test]
fn same_seed_same_metrics_and_loss_decomposition() {
    let (train, test) = small_data(0.4);
    let cfg = small_config(3);
    let a = run_regce::<f32>(&cfg, &train, &test, &mut NoObserver).unwrap();
    let b = run_regce::<f32>(&cfg, &train, &test, &mut NoObserver).unwrap();
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.model.checkpoint().to_bytes(), b.model.checkpoint().to_bytes());
    let mask = train.corruption_mask.as_ref().unwrap();
    let noisy = mask.iter().filter(|&&m| m).count() as f64;
    let clean = mask.len() as f64 - noisy;
    for r in &a.log.records {
        let mixed = (clean * r.loss_clean.unwrap() + noisy * r.loss_noisy.unwrap()) / (clean + noisy);
        assert!((mixed - r.loss_all).abs() < 1e-10, "{mixed} vs {}", r.loss_all);
    }
    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_regce::<f32>(&other, &train, &test, &mut NoObserver).unwrap();
    assert_ne!(a.log.to_jsonl(), c.log.to_jsonl());
}

#[test]
fn sharp_schedule_follows_the_trigger() {
    let (train, test) = small_data(0.4);
    let mut cfg = small_config(6);
    cfg.schedule.plateau.max_trigger_epoch = Some(1);
    let out = run_regce::<f32>(&cfg, &train, &test, &mut NoObserver).unwrap();
    let lrs: Vec<f64> = out.log.records.iter().map(|r| r.lr).collect();
    let t = out.trigger_epoch.unwrap();
    assert!(out.log.records[t - 1].plateau);
    assert!(lrs[..t].iter().all(|&l| l == 0.1));
    assert!((lrs[t] - 1e-3).abs() < 1e-15);
    assert!(lrs[t + 1..].iter().all(|&l| (l - 1e-5).abs() < 1e-17));
}

#[test]
fn evaluation_rules() {
    let (_, test) = small_data(0.0);
    let spec = ModelSpec::mlp(&[4], [3, 8, 8], 3);
    let mut flat: Model<f64> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for p in flat.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // Constant logits: argmax ties resolve to class 0.
    let e = evaluate(&flat, &test, 7).unwrap();
    assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert!((e.mean_loss - 3f64.ln()).abs() < 1e-12);

    let model: Model<f64> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let a = evaluate(&model, &test, 16).unwrap();
    let b = evaluate(&model, &test.permuted(&order), 16).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert!((a.mean_loss - b.mean_loss).abs() < 1e-12);
    let empty = test.permuted(&[]);
    assert!(evaluate(&model, &empty, 16).is_err());
}

#[test]
fn strict_config_parsing() {
    let good = serde_json::to_string(&small_config(2)).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&good).unwrap(), small_config(2));
    let typo = good.replacen("\"epochs\"", "\"epoch\"", 1);
    assert!(serde_json::from_str::<TrainConfig>(&typo).is_err());
}

#[test]
fn semi_run_reports_split() {
    let (train, test) = small_data(0.4);
    let cfg = small_config(2);
    let mut mm = MixMatchSpec::new(2);
    mm.train_view.crop_padding = 2;
    mm.split_view.crop_padding = 2;
    let out = run_regce_semi::<f32>(&cfg, &mm, &train, &test, &mut NoObserver).unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out.log.records[..2].iter().all(|r| r.split_size.is_none()));
    let first = &out.log.records[2];
    assert_eq!(first.lambda_u, Some(0.0));
    assert!(first.split_size.is_some());
    let again = run_regce_semi::<f32>(&cfg, &mm, &train, &test, &mut NoObserver).unwrap();
    assert_eq!(out.log.to_jsonl(), again.log.to_jsonl());
}
