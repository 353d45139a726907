//! Exponential moving average of model weights.

use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::{Float, NamedTensor};

/// Shadow copy of a model. Parameters are averaged; batchnorm running
/// statistics are copied from the online model on every update.
#[derive(Clone, Debug)]
pub struct EmaState<T> {
    momentum: f64,
    shadow: Option<Model<T>>,
    updates: u64,
}

impl<T: Float> EmaState<T> {
    /// An empty state; the first [`EmaState::update`] copies the online model.
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("ema", format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(EmaState {
            momentum,
            shadow: None,
            updates: 0,
        })
    }

    /// Starts the shadow from the online weights.
    pub fn from_model(model: &Model<T>, momentum: f64) -> Result<Self> {
        let mut s = Self::new(momentum)?;
        s.shadow = Some(model.clone());
        Ok(s)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn shadow(&self) -> Option<&Model<T>> {
        self.shadow.as_ref()
    }

    pub fn shadow_mut(&mut self) -> Option<&mut Model<T>> {
        self.shadow.as_mut()
    }

    /// `shadow <- m * shadow + (1 - m) * online`.
    pub fn update(&mut self, online: &Model<T>) -> Result<()> {
        let m = T::from_f64_lossy(self.momentum);
        let shadow = match &mut self.shadow {
            None => {
                self.shadow = Some(online.clone());
                self.updates += 1;
                return Ok(());
            }
            Some(s) => s,
        };
        check_shapes(shadow.params(), online.params())?;
        check_shapes(shadow.buffers(), online.buffers())?;
        for (s, o) in shadow.params_mut().iter_mut().zip(online.params()) {
            for (sv, &ov) in s.tensor.data_mut().iter_mut().zip(o.tensor.data()) {
                *sv = m * *sv + (T::one() - m) * ov;
            }
        }
        for (s, o) in shadow.buffers_mut().iter_mut().zip(online.buffers()) {
            s.tensor.data_mut().copy_from_slice(o.tensor.data());
        }
        self.updates += 1;
        Ok(())
    }

    /// Eval-mode snapshot of the shadow weights.
    pub fn ema_model(&self) -> Result<Model<T>> {
        let mut m = self
            .shadow
            .clone()
            .ok_or_else(|| Error::invalid("ema_model", "EMA state has no shadow weights yet"))?;
        m.set_mode(Mode::Eval);
        m.zero_grads();
        Ok(m)
    }
}

fn check_shapes<T: Float>(a: &[NamedTensor<T>], b: &[NamedTensor<T>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid("ema_update", format!("{} shadow tensors vs {} online", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.tensor.shape() != y.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: x.tensor.shape().to_vec(),
                rhs: y.tensor.shape().to_vec(),
            });
        }
    }
    Ok(())
}
