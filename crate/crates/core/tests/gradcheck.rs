mod common;

use common::cases::{op_gradient_errors, TOL};
use common::random_tensor;
use regce::tensor::{Tape, Targets, Tensor};

#[test]
fn every_op_passes_finite_difference() {
    let errors = op_gradient_errors();
    assert!(errors.len() >= 25);
    for (name, err) in errors {
        assert!(err < TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let z = random_tensor(&[3, 4], 80).data().iter().map(|v| v * 5.0).collect::<Vec<_>>();
    let targets = [2usize, 0, 3];
    let mut tape = Tape::<f64>::new();
    let zv = tape.leaf(&Tensor::from_f64(&[3, 4], &z).unwrap());
    let loss = tape.softmax_cross_entropy(zv, Targets::Indices(&targets)).unwrap();

    // Independent evaluation: plain log(sum(exp(z))) without max shifting.
    let mut oracle = 0.0;
    for (row, &y) in z.chunks(4).zip(&targets) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        oracle += lse - row[y];
    }
    oracle /= 3.0;
    assert!((tape.value(loss)[0] - oracle).abs() < 1e-10);
}
