use super::{Float, NamedTensor};
use crate::error::{Error, Result};

/// Momentum SGD with classical (coupled) weight decay.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> SgdState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 || learning_rate < 0.0 {
            return Err(Error::invalid(
                "sgd",
                format!("lr={learning_rate} momentum={momentum} weight_decay={weight_decay}"),
            ));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

/// One update: `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
///
/// Every parameter must carry a gradient. A non-finite gradient aborts the
/// step before anything is modified, naming the offending parameter.
pub fn sgd_step<T: Float>(params: &mut [NamedTensor<T>], state: &mut SgdState<T>) -> Result<()> {
    for p in params.iter() {
        match p.tensor.grad() {
            None => return Err(Error::invalid("sgd_step", format!("parameter `{}` has no gradient", p.name))),
            Some(g) if g.iter().any(|v| !v.is_finite()) => {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)))
            }
            Some(_) => {}
        }
    }
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
    }
    let lr = T::from_f64_lossy(state.learning_rate);
    let mom = T::from_f64_lossy(state.momentum);
    let wd = T::from_f64_lossy(state.weight_decay);
    for (p, vel) in params.iter_mut().zip(&mut state.velocity) {
        assert_eq!(vel.len(), p.tensor.len(), "velocity shape tracks parameter `{}`", p.name);
        let grad = p.tensor.grad().expect("checked above").to_vec();
        for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = mom * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}
