use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regce::ema::EmaState;
use regce::nn::{build_model, Mode, Model, ModelSpec};

fn mlp(seed: u64) -> Model<f64> {
    build_model(&ModelSpec::mlp(&[5], [1, 2, 2], 3), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn fill(model: &mut Model<f64>, v: f64) {
    for p in model.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = v);
    }
}

fn closed_form_error(m: f64, k: u32, s0: f64, w: f64) -> f64 {
    let mut online = mlp(0);
    fill(&mut online, w);
    let mut ema = EmaState::from_model(&online, m).unwrap();
    fill(ema.shadow_mut().unwrap(), s0);
    for _ in 0..k {
        ema.update(&online).unwrap();
    }
    let expected = w + (s0 - w) * m.powi(k as i32);
    ema.shadow()
        .unwrap()
        .params()
        .iter()
        .flat_map(|p| p.tensor.data().iter())
        .map(|&v| (v - expected).abs())
        .fold(0.0, f64::max)
}

#[test]
fn closed_form_fixed_cases() {
    for m in [0.0, 0.9, 0.999] {
        for k in [1, 10, 100, 1000] {
            let err = closed_form_error(m, k, 0.0, 1.0);
            assert!(err < 1e-12, "m={m} k={k} err={err}");
        }
    }
}

#[test]
fn single_step_values() {
    let mut online = mlp(1);
    fill(&mut online, 1.0);
    let mut ema = EmaState::from_model(&online, 0.999).unwrap();
    fill(ema.shadow_mut().unwrap(), 0.0);
    ema.update(&online).unwrap();
    let v = ema.shadow().unwrap().params()[0].tensor.data()[0];
    assert!((v - 0.001).abs() < 1e-15);

    let online = mlp(2);
    let mut ema = EmaState::from_model(&mlp(3), 0.0).unwrap();
    ema.update(&online).unwrap();
    let x: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
    let mut eval = online.clone();
    eval.set_mode(Mode::Eval);
    assert_eq!(ema.ema_model().unwrap().predict(&x, 2).unwrap(), eval.predict(&x, 2).unwrap());
}

#[test]
fn snapshot_and_round_trip() {
    let mut online = mlp(4);
    let ema = EmaState::from_model(&online, 0.9).unwrap();
    let snapshot = ema.ema_model().unwrap();
    let x: Vec<f64> = (0..4).map(|i| i as f64).collect();
    let before = snapshot.predict(&x, 1).unwrap();
    fill(&mut online, 3.0);
    assert_eq!(ema.ema_model().unwrap().predict(&x, 1).unwrap(), before);

    let bytes = snapshot.checkpoint().to_bytes();
    let mut restored = mlp(9);
    restored.load_checkpoint(&regce::tensor::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(restored.predict(&x, 1).unwrap(), before);
}

#[test]
fn misuse_rejected() {
    assert!(EmaState::<f64>::new(1.0).is_err());
    assert!(EmaState::<f64>::new(0.5).unwrap().ema_model().is_err());
    let other: Model<f64> =
        build_model(&ModelSpec::mlp(&[6], [1, 2, 2], 3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut ema = EmaState::from_model(&mlp(0), 0.5).unwrap();
    assert!(ema.update(&other).is_err());
}

#[test]
fn batchnorm_buffers_are_copied() {
    let spec = ModelSpec::micro_resnet(vec![(1, 2)], [1, 4, 4], 2);
    let mut online: Model<f64> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut ema = EmaState::from_model(&online, 0.999).unwrap();
    for b in online.buffers_mut() {
        b.tensor.data_mut().iter_mut().for_each(|v| *v = 7.0);
    }
    ema.update(&online).unwrap();
    assert!(ema.shadow().unwrap().buffers().iter().all(|b| b.tensor.data().iter().all(|&v| v == 7.0)));
}

proptest! {
    #[test]
    fn closed_form_property(m in 0.0f64..0.9995, k in 1u32..=1000, s0 in -2.0f64..2.0, w in -2.0f64..2.0) {
        prop_assert!(closed_form_error(m, k, s0, w) < 1e-12);
    }
}
