//! Finite-difference cases for every differentiable tape operation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regce::nn::{build_model, Model, ModelSpec};
use regce::tensor::{Conv2dAttrs, Tape, Targets, Tensor, Var};

use super::{max_relative_error, random_tensor, weighted_sum};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn check(out: &mut Vec<(String, f64)>, name: &str, inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    out.push((name.to_string(), max_relative_error(inputs, H, build)));
}

/// `(case name, max relative error)` for each operation and variant.
pub fn op_gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    elementwise_ops(&mut out);
    bias_add_2d_and_4d(&mut out);
    matmul(&mut out);
    conv2d_variants(&mut out);
    batchnorm_train_and_eval(&mut out);
    pooling_and_shape_ops(&mut out);
    losses(&mut out);
    out
}

fn elementwise_ops(out: &mut Vec<(String, f64)>) {
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[3, 4], 2);
    check(out, "add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 3)
    });
    check(out, "sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        weighted_sum(t, y, 4)
    });
    check(out, "mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 5)
    });
    check(out, "scale", &[a.clone()], &|t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y, 6)
    });
    check(out, "relu", &[a.clone()], &|t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 7)
    });
    check(out, "sum", &[a.clone()], &|t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.sum(y)
    });
    check(out, "mean", &[a], &|t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.mean(y)
    });
}

fn bias_add_2d_and_4d(out: &mut Vec<(String, f64)>) {
    check(out, "bias_add 2d", &[random_tensor(&[3, 4], 10), random_tensor(&[4], 11)], &|t, v| {
        let y = t.bias_add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 12)
    });
    check(out, "bias_add 4d", &[random_tensor(&[2, 3, 2, 2], 13), random_tensor(&[3], 14)], &|t, v| {
        let y = t.bias_add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 15)
    });
}

fn matmul(out: &mut Vec<(String, f64)>) {
    check(out, "matmul", &[random_tensor(&[3, 5], 20), random_tensor(&[5, 2], 21)], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 22)
    });
}

fn conv2d_variants(out: &mut Vec<(String, f64)>) {
    for (stride, padding, seed) in [(1, 0, 30), (1, 1, 31), (2, 1, 32), (2, 0, 33)] {
        let x = random_tensor(&[2, 3, 5, 5], seed);
        let k = random_tensor(&[4, 3, 3, 3], seed + 100);
        check(out, &format!("conv2d s{stride} p{padding}"), &[x, k], &|t, v| {
            let y = t.conv2d(v[0], v[1], Conv2dAttrs { stride, padding }).unwrap();
            weighted_sum(t, y, seed + 200)
        });
    }
    let x = random_tensor(&[2, 2, 4, 4], 34);
    let k = random_tensor(&[3, 2, 1, 1], 35);
    check(out, "conv2d 1x1 stride 2", &[x, k], &|t, v| {
        let y = t.conv2d(v[0], v[1], Conv2dAttrs { stride: 2, padding: 0 }).unwrap();
        weighted_sum(t, y, 36)
    });
}

fn batchnorm_train_and_eval(out: &mut Vec<(String, f64)>) {
    let x = random_tensor(&[3, 2, 3, 3], 40);
    let g = random_tensor(&[2], 41);
    let b = random_tensor(&[2], 42);
    check(out, "batchnorm2d batch stats", &[x.clone(), g.clone(), b.clone()], &|t, v| {
        let (y, _) = t.batchnorm2d(v[0], v[1], v[2], None, 1e-5).unwrap();
        weighted_sum(t, y, 43)
    });
    check(out, "batchnorm2d running stats", &[x, g, b], &|t, v| {
        let (y, _) = t
            .batchnorm2d(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.8, 1.3])), 1e-5)
            .unwrap();
        weighted_sum(t, y, 44)
    });
}

fn pooling_and_shape_ops(out: &mut Vec<(String, f64)>) {
    check(out, "global_avg_pool", &[random_tensor(&[2, 3, 4, 4], 50)], &|t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        weighted_sum(t, y, 51)
    });
    check(out, "max_pool2d", &[random_tensor(&[2, 2, 4, 4], 52)], &|t, v| {
        let y = t.max_pool2d(v[0], 2, 2).unwrap();
        weighted_sum(t, y, 53)
    });
    check(out, "reshape", &[random_tensor(&[2, 6], 54)], &|t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        weighted_sum(t, y, 55)
    });
    for axis in [0, 1] {
        check(out, 
            &format!("concat axis {axis}"),
            &[random_tensor(&[2, 3], 56), random_tensor(&[2, 3], 57)],
            &|t, v| {
                let y = t.concat(&[v[0], v[1], v[0]], axis).unwrap();
                weighted_sum(t, y, 58)
            },
        );
    }
    check(out, "narrow", &[random_tensor(&[4, 3], 59)], &|t, v| {
        let y = t.narrow(v[0], 0, 1, 2).unwrap();
        weighted_sum(t, y, 60)
    });
}

fn losses(out: &mut Vec<(String, f64)>) {
    let z = random_tensor(&[3, 4], 70);
    check(out, "softmax_cross_entropy indices", &[z.clone()], &|t, v| {
        t.softmax_cross_entropy(v[0], Targets::Indices(&[0, 3, 1])).unwrap()
    });
    let probs = [0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 1.0, 0.0];
    check(out, "softmax_cross_entropy probs", &[z.clone()], &|t, v| {
        t.softmax_cross_entropy(v[0], Targets::Probs(&probs)).unwrap()
    });
    check(out, "softmax_mse", &[z], &|t, v| t.softmax_mse(v[0], &probs).unwrap());
}

fn loss_of(model: &Model<f64>, images: &[f64], labels: &[usize]) -> (f64, Model<f64>) {
    let mut m = model.clone();
    m.zero_grads();
    let [c, h, w] = m.spec().input_shape;
    let mut tape = Tape::new();
    let x = tape.leaf_from(vec![labels.len(), c, h, w], images.to_vec(), false).unwrap();
    let pass = m.forward(&mut tape, x, false).unwrap();
    let loss = tape.softmax_cross_entropy(pass.logits, Targets::Indices(labels)).unwrap();
    tape.backward(loss).unwrap();
    m.accumulate_grads(&tape, &pass);
    (tape.value(loss)[0], m)
}

/// Worst central-difference error over every parameter of a two-block micro
/// residual network (training-mode batchnorm, batch of 2).
pub fn micro_resnet_gradient_error() -> f64 {
    let spec = ModelSpec::micro_resnet(vec![(1, 3), (1, 4)], [2, 6, 6], 3);
    let model: Model<f64> = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let images = random_tensor(&[2, 2, 6, 6], 4).into_data();
    let labels = [0, 2];
    let (_, with_grads) = loss_of(&model, &images, &labels);

    let mut worst: f64 = 0.0;
    for (pi, p) in model.params().iter().enumerate() {
        let analytic = with_grads.params()[pi].tensor.grad().unwrap().to_vec();
        for j in 0..p.tensor.len() {
            let mut plus = model.clone();
            plus.params_mut()[pi].tensor.data_mut()[j] += H;
            let mut minus = model.clone();
            minus.params_mut()[pi].tensor.data_mut()[j] -= H;
            let numeric = (loss_of(&plus, &images, &labels).0 - loss_of(&minus, &images, &labels).0) / (2.0 * H);
            let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
