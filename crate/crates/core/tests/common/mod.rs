//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regce::tensor::{Tape, Tensor, Var};

/// Largest element-wise relative error between analytic and central-difference
/// gradients of `build` with respect to every input.
///
/// The denominator is floored at `1e-6` so entries that are exactly zero on
/// both sides do not divide by zero.
pub fn max_relative_error(
    inputs: &[Tensor<f64>],
    h: f64,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &values).unwrap()
}

/// Reduces any tensor to a scalar through a fixed random weighting, so every
/// output element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let w = random_tensor(tape.shape(x), seed ^ 0x9e37_79b9);
    let wv = tape.leaf(&w);
    let prod = tape.mul(x, wv).unwrap();
    tape.sum(prod)
}
