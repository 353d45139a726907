//! Desk-scale classifiers: a micro residual network and an MLP.
//!
//! A model owns its named parameters and buffers; `forward` records one pass on
//! a caller-supplied [`Tape`] and never mutates the model. Batchnorm statistics
//! observed in training mode come back in the [`ForwardPass`] and are folded
//! into the running buffers by [`Model::absorb_batch_stats`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Checkpoint, Conv2dAttrs, Float, NamedTensor, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MicroResnet,
    Mlp,
}

/// Architecture description.
///
/// For `micro_resnet` each stage is `(blocks, width)`; every stage after the
/// first halves the spatial resolution. For `mlp` each stage contributes
/// `blocks` hidden layers of `width` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub stages: Vec<(usize, usize)>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub use_batchnorm: bool,
    /// Stride of the stem convolution (micro_resnet only).
    #[serde(default = "default_one")]
    pub stem_stride: usize,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

impl ModelSpec {
    pub fn micro_resnet(stages: Vec<(usize, usize)>, input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::MicroResnet,
            stages,
            input_shape,
            num_classes,
            use_batchnorm: true,
            stem_stride: 1,
        }
    }

    pub fn mlp(hidden: &[usize], input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            stages: hidden.iter().map(|&w| (1, w)).collect(),
            input_shape,
            num_classes,
            use_batchnorm: false,
            stem_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("build_model", msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("zero-sized input {:?}", self.input_shape));
        }
        if self.stages.iter().any(|&(b, w)| b == 0 || w == 0) {
            return bad(format!("zero-sized layer in stages {:?}", self.stages));
        }
        if self.kind == ModelKind::MicroResnet && (self.stages.is_empty() || self.stem_stride == 0) {
            return bad("micro_resnet needs at least one stage and a positive stem stride".into());
        }
        Ok(())
    }

    pub fn last_width(&self) -> usize {
        self.stages.last().map(|s| s.1).unwrap_or(self.input_dim())
    }

    fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    bias: Option<usize>,
    bn: Option<Bn>,
    attrs: Conv2dAttrs,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
    bn: Option<Bn>,
}

#[derive(Clone, Debug)]
enum Plan {
    Resnet {
        stem: ConvUnit,
        blocks: Vec<ResBlock>,
        head: Dense,
    },
    Mlp {
        hidden: Vec<Dense>,
        head: Dense,
    },
}

/// Output of [`Model::forward`].
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Last-stage feature maps, `N x C x H' x W'`, when requested.
    pub features: Option<Var>,
    param_vars: Vec<Var>,
    bn_stats: Vec<(Bn, BatchStats<T>)>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    mode: Mode,
    plan: Plan,
}

struct Builder<'r, T, R> {
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    rng: &'r mut R,
}

impl<T: Float, R: Rng> Builder<'_, T, R> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(self.rng))).collect();
        self.params
            .push(NamedTensor::new(name, Tensor::new(shape.to_vec(), data).expect("shape")));
        self.params.len() - 1
    }

    fn constant(&mut self, name: String, len: usize, value: f64) -> usize {
        self.params
            .push(NamedTensor::new(name, Tensor::full(&[len], T::from_f64_lossy(value))));
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Bn {
        let gamma = self.constant(format!("{prefix}.bn.weight"), c, 1.0);
        let beta = self.constant(format!("{prefix}.bn.bias"), c, 0.0);
        self.buffers.push(NamedTensor::new(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c])));
        self.buffers
            .push(NamedTensor::new(format!("{prefix}.bn.running_var"), Tensor::full(&[c], T::one())));
        let var = self.buffers.len() - 1;
        Bn {
            gamma,
            beta,
            mean: var - 1,
            var,
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, bn: bool) -> ConvUnit {
        let weight = self.he(format!("{prefix}.conv.weight"), &[cout, cin, k, k], cin * k * k);
        let bias = (!bn).then(|| self.constant(format!("{prefix}.conv.bias"), cout, 0.0));
        let bn = bn.then(|| self.bn(prefix, cout));
        ConvUnit {
            weight,
            bias,
            bn,
            attrs: Conv2dAttrs {
                stride,
                padding: k / 2,
            },
        }
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bn: bool) -> Dense {
        let weight = self.he(format!("{prefix}.weight"), &[fan_in, fan_out], fan_in);
        let bias = self.constant(format!("{prefix}.bias"), fan_out, 0.0);
        let bn = bn.then(|| self.bn(prefix, fan_out));
        Dense { weight, bias, bn }
    }
}

/// Builds a model with He-initialized weights; deterministic in `rng`.
pub fn build_model<T: Float, R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    spec.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        buffers: Vec::new(),
        rng,
    };
    let bn = spec.use_batchnorm;
    let plan = match spec.kind {
        ModelKind::MicroResnet => {
            let cin = spec.input_shape[0];
            let mut width = spec.stages[0].1;
            let stem = b.conv("stem", cin, width, 3, spec.stem_stride, bn);
            let mut blocks = Vec::new();
            for (s, &(count, out)) in spec.stages.iter().enumerate() {
                for i in 0..count {
                    let stride = if s > 0 && i == 0 { 2 } else { 1 };
                    let prefix = format!("stage{s}.block{i}");
                    let conv1 = b.conv(&format!("{prefix}.conv1"), width, out, 3, stride, bn);
                    let conv2 = b.conv(&format!("{prefix}.conv2"), out, out, 3, 1, bn);
                    let shortcut = (stride != 1 || width != out)
                        .then(|| b.conv(&format!("{prefix}.shortcut"), width, out, 1, stride, bn));
                    blocks.push(ResBlock {
                        conv1,
                        conv2,
                        shortcut,
                    });
                    width = out;
                }
            }
            let head = b.dense("head", width, spec.num_classes, false);
            Plan::Resnet { stem, blocks, head }
        }
        ModelKind::Mlp => {
            let mut fan_in = spec.input_dim();
            let mut hidden = Vec::new();
            for (s, &(count, width)) in spec.stages.iter().enumerate() {
                for i in 0..count {
                    hidden.push(b.dense(&format!("hidden{s}.{i}"), fan_in, width, bn));
                    fan_in = width;
                }
            }
            let head = b.dense("head", fan_in, spec.num_classes, false);
            Plan::Mlp { hidden, head }
        }
    };
    Ok(Model {
        spec: spec.clone(),
        params: b.params,
        buffers: b.buffers,
        mode: Mode::Train,
        plan,
    })
}

struct Pass<'a, T: Float> {
    model: &'a Model<T>,
    tape: &'a mut Tape<T>,
    vars: Vec<Var>,
    stats: Vec<(Bn, BatchStats<T>)>,
}

impl<T: Float> Pass<'_, T> {
    fn bn(&mut self, x: Var, bn: &Bn) -> Result<Var> {
        let (gamma, beta) = (self.vars[bn.gamma], self.vars[bn.beta]);
        match self.model.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm2d(x, gamma, beta, None, BN_EPS)?;
                self.stats.push((bn.clone(), stats.expect("batch statistics")));
                Ok(y)
            }
            Mode::Eval => {
                let running = (
                    self.model.buffers[bn.mean].tensor.data(),
                    self.model.buffers[bn.var].tensor.data(),
                );
                Ok(self.tape.batchnorm2d(x, gamma, beta, Some(running), BN_EPS)?.0)
            }
        }
    }

    fn conv(&mut self, x: Var, unit: &ConvUnit) -> Result<Var> {
        let mut y = self.tape.conv2d(x, self.vars[unit.weight], unit.attrs)?;
        if let Some(b) = unit.bias {
            y = self.tape.bias_add(y, self.vars[b])?;
        }
        if let Some(bn) = &unit.bn {
            y = self.bn(y, bn)?;
        }
        Ok(y)
    }

    fn dense(&mut self, x: Var, layer: &Dense) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[layer.weight])?;
        let mut y = self.tape.bias_add(y, self.vars[layer.bias])?;
        if let Some(bn) = &layer.bn {
            let (n, c) = (self.tape.shape(y)[0], self.tape.shape(y)[1]);
            let y4 = self.tape.reshape(y, &[n, c, 1, 1])?;
            let z = self.bn(y4, bn)?;
            y = self.tape.reshape(z, &[n, c])?;
        }
        Ok(y)
    }
}

impl<T: Float> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records one forward pass. Parameters are tape leaves that require
    /// gradients only in training mode.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, capture_features: bool) -> Result<ForwardPass<T>> {
        let shape = tape.shape(input).to_vec();
        let [c, h, w] = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape,
                rhs: vec![c, h, w],
            });
        }
        let n = shape[0];
        let train = self.mode == Mode::Train;
        let vars = self
            .params
            .iter()
            .map(|p| {
                tape.leaf_from(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), train)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pass = Pass {
            model: self,
            tape,
            vars,
            stats: Vec::new(),
        };
        let (logits, features) = match &self.plan {
            Plan::Resnet { stem, blocks, head } => {
                let x = pass.conv(input, stem)?;
                let mut x = pass.tape.relu(x);
                for block in blocks {
                    let y = pass.conv(x, &block.conv1)?;
                    let y = pass.tape.relu(y);
                    let y = pass.conv(y, &block.conv2)?;
                    let skip = match &block.shortcut {
                        Some(unit) => pass.conv(x, unit)?,
                        None => x,
                    };
                    let y = pass.tape.add(y, skip)?;
                    x = pass.tape.relu(y);
                }
                let pooled = pass.tape.global_avg_pool(x)?;
                (pass.dense(pooled, head)?, x)
            }
            Plan::Mlp { hidden, head } => {
                let mut x = pass.tape.reshape(input, &[n, c * h * w])?;
                for layer in hidden {
                    let y = pass.dense(x, layer)?;
                    x = pass.tape.relu(y);
                }
                let logits = pass.dense(x, head)?;
                let width = pass.tape.shape(x)[1];
                let feats = if capture_features {
                    pass.tape.reshape(x, &[n, width, 1, 1])?
                } else {
                    x
                };
                (logits, feats)
            }
        };
        Ok(ForwardPass {
            logits,
            features: capture_features.then_some(features),
            param_vars: pass.vars,
            bn_stats: pass.stats,
        })
    }

    /// Adds the gradients recorded on `tape` for this pass into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, pass: &ForwardPass<T>) {
        for (p, &v) in self.params.iter_mut().zip(&pass.param_vars) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g),
                None => p.tensor.accumulate_grad(&vec![T::zero(); p.tensor.len()]),
            }
        }
    }

    /// `running <- (1 - 0.1) * running + 0.1 * batch` for every batchnorm.
    pub fn absorb_batch_stats(&mut self, pass: &ForwardPass<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (bn, stats) in &pass.bn_stats {
            for (r, &b) in self.buffers[bn.mean].tensor.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.buffers[bn.var].tensor.data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Eval-semantics logits for a batch of `n` images (running statistics,
    /// nothing recorded for gradients). The model's mode is ignored.
    pub fn predict(&self, images: &[T], n: usize) -> Result<Vec<T>> {
        let [c, h, w] = self.spec.input_shape;
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![n, c, h, w], images.to_vec(), false)?;
        let pass = if self.mode == Mode::Eval {
            self.forward(&mut tape, x, false)?
        } else {
            let mut view = self.clone();
            view.mode = Mode::Eval;
            view.forward(&mut tape, x, false)?
        };
        Ok(tape.value(pass.logits).to_vec())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let strip = |v: &[NamedTensor<T>]| {
            v.iter()
                .map(|nt| {
                    let t = Tensor::new(nt.tensor.shape().to_vec(), nt.tensor.data().to_vec()).expect("shape");
                    NamedTensor::new(nt.name.clone(), t)
                })
                .collect()
        };
        Checkpoint {
            params: strip(&self.params),
            buffers: strip(&self.buffers),
        }
    }

    /// Replaces parameter and buffer values; names and shapes must match.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        fn load<T: Float>(dst: &mut [NamedTensor<T>], src: &[NamedTensor<T>]) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::invalid(
                    "load_checkpoint",
                    format!("expected {} tensors, found {}", dst.len(), src.len()),
                ));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                if d.name != s.name || d.tensor.shape() != s.tensor.shape() {
                    return Err(Error::invalid(
                        "load_checkpoint",
                        format!("`{}` {:?} does not match `{}` {:?}", s.name, s.tensor.shape(), d.name, d.tensor.shape()),
                    ));
                }
                d.tensor.data_mut().copy_from_slice(s.tensor.data());
            }
            Ok(())
        }
        load(&mut self.params, &ckpt.params)?;
        load(&mut self.buffers, &ckpt.buffers)
    }
}
