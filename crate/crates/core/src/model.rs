//! Student segmentation network, its projection head, and the EMA teacher.
//!
//! The backbone is a two-level U-Net:
//!
//! ```text
//! x ─ conv3x3(1→w)·BN·ReLU ──────────────────────────────┐ skip
//!        └ maxpool2 ─ conv3x3(w→2w)·BN·ReLU ─ conv1x1(2w→w) ─ up2 ─ concat ─ conv3x3(2w→w)·BN·ReLU ─ features
//! ```
//!
//! `features` feed the 1x1 segmentation head and the projection head of three
//! 1x1 Conv-ReLU-BN blocks.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{argmax_channels, LabelMap};
use crate::numerics::{softmax_channels, BatchStats, ConvGeom, Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width of the first level; the second level uses twice this.
    pub base_width: usize,
    /// Projection output channels.
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Weight kept by running BN statistics on each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Start the segmentation head at zero so initial logits are all zero.
    pub zero_init_head: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            base_width: 16,
            embed_dim: 32,
            height: 64,
            width: 64,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            zero_init_head: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.base_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "model needs at least one input channel, two classes and positive widths".into(),
            ));
        }
        if self.height < 2 || self.width < 2 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "spatial size {}x{} must be even and at least 2",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("bn_momentum must lie in [0, 1) and bn_eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, running statistics collected.
    Train,
    /// Running statistics in BN.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    gamma: usize,
    beta: usize,
    slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    enc1: (Conv, Norm),
    enc2: (Conv, Norm),
    reduce: Conv,
    dec: (Conv, Norm),
    seg: Conv,
    proj: [(Conv, Norm); 3],
}

/// Running mean and variance of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Student network: backbone, segmentation head and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

/// Handles produced by one forward pass.
pub struct Forward<T> {
    /// `[N, C, H, W]` class scores.
    pub logits: Var,
    /// `[R, D, H, W]` projected features for the requested rows, if any.
    pub embedding: Option<Var>,
    /// Parameter leaves in [`SegModel::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per BN layer (train mode only).
    pub bn_stats: Vec<Option<BatchStats<T>>>,
}

struct Builder<T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| {
            if zero {
                T::zero()
            } else {
                T::lit(normal.sample(&mut self.rng))
            }
        });
        let w_idx = self.push(format!("{name}.weight"), w);
        let b_idx = self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv {
            w: w_idx,
            b: b_idx,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(vec![c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
        self.running.push(RunningStats {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Norm {
            gamma,
            beta,
            slot: self.running.len() - 1,
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let d = config.embed_dim;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let enc1 = (b.conv("enc1.conv", w, config.in_channels, 3, false), b.norm("enc1.bn", w));
        let enc2 = (b.conv("enc2.conv", 2 * w, w, 3, false), b.norm("enc2.bn", 2 * w));
        let reduce = b.conv("up.reduce", w, 2 * w, 1, false);
        let dec = (b.conv("dec.conv", w, 2 * w, 3, false), b.norm("dec.bn", w));
        let seg = b.conv("seg_head", config.num_classes, w, 1, config.zero_init_head);
        let proj = [
            (b.conv("proj.0.conv", d, w, 1, false), b.norm("proj.0.bn", d)),
            (b.conv("proj.1.conv", d, d, 1, false), b.norm("proj.1.bn", d)),
            (b.conv("proj.2.conv", d, d, 1, false), b.norm("proj.2.bn", d)),
        ];
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            running: b.running,
            layout: Layout {
                enc1,
                enc2,
                reduce,
                dec,
                seg,
                proj,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Runs the network on `x: [N, in_channels, H, W]`.
    ///
    /// Parameters are registered as trainable leaves when `trainable` is set,
    /// otherwise as constants. The projection head runs only on batch rows in
    /// `embed_rows`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        trainable: bool,
        embed_rows: Option<Range<usize>>,
    ) -> Result<Forward<T>> {
        let (n, c, h, w) = match *g.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => {
                return Err(Error::InvalidShape {
                    op: "forward",
                    msg: format!("expected [N, C, H, W], got {s:?}"),
                })
            }
        };
        if c != self.config.in_channels || h != self.config.height || w != self.config.width {
            return Err(Error::shape(
                "forward",
                &[n, self.config.in_channels, self.config.height, self.config.width],
                &[n, c, h, w],
            ));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect();
        let mut bn_stats = vec![None; self.running.len()];
        let lay = self.layout;

        let mut block = |g: &mut Graph<T>, x: Var, (conv, norm): (Conv, Norm), relu_first: bool| -> Result<Var> {
            let y = self.conv(g, x, conv, &params)?;
            if relu_first {
                let y = g.relu(y)?;
                self.norm(g, y, norm, &params, mode, &mut bn_stats)
            } else {
                let y = self.norm(g, y, norm, &params, mode, &mut bn_stats)?;
                g.relu(y)
            }
        };

        let skip = block(g, x, lay.enc1, false)?;
        let down = g.max_pool2d(skip, 2, 2)?;
        let deep = block(g, down, lay.enc2, false)?;
        let reduced = self.conv(g, deep, lay.reduce, &params)?;
        let up = g.upsample_nearest(reduced, 2)?;
        let cat = g.concat_channels(up, skip)?;
        let features = block(g, cat, lay.dec, false)?;
        let logits = self.conv(g, features, lay.seg, &params)?;

        let embedding = match embed_rows {
            Some(rows) if !rows.is_empty() => {
                let mut z = if rows.start == 0 && rows.end == n {
                    features
                } else {
                    g.narrow0(features, rows.start, rows.len())?
                };
                for stage in lay.proj {
                    z = block(g, z, stage, true)?;
                }
                Some(z)
            }
            _ => None,
        };
        Ok(Forward {
            logits,
            embedding,
            params,
            bn_stats,
        })
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, conv: Conv, params: &[Var]) -> Result<Var> {
        g.conv2d(
            x,
            params[conv.w],
            Some(params[conv.b]),
            ConvGeom {
                stride: 1,
                padding: conv.pad,
            },
        )
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        norm: Norm,
        params: &[Var],
        mode: Mode,
        stats: &mut [Option<BatchStats<T>>],
    ) -> Result<Var> {
        let eps = T::lit(self.config.bn_eps);
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm(x, params[norm.gamma], params[norm.beta], eps)?;
                stats[norm.slot] = Some(s);
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[norm.slot];
                g.batch_norm_eval(x, params[norm.gamma], params[norm.beta], &r.mean, &r.var, eps)
            }
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        let m = T::lit(self.config.bn_momentum);
        let one = T::one();
        for (run, s) in self.running.iter_mut().zip(stats) {
            if let Some(s) = s {
                for (r, &b) in run.mean.iter_mut().zip(&s.mean) {
                    *r = m * *r + (one - m) * b;
                }
                for (r, &b) in run.var.iter_mut().zip(&s.var) {
                    *r = m * *r + (one - m) * b;
                }
            }
        }
    }

    /// Eval-mode logits and projected features of one `[in_channels, H, W]` image.
    pub fn forward_features(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = image.shape().to_vec();
        let x = image.clone().reshape(
            [vec![1], shape].concat(),
        )?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, Mode::Eval, false, Some(0..1))?;
        let c = self.config.num_classes;
        let (h, w) = (self.config.height, self.config.width);
        let logits = g.value(out.logits).clone().reshape(vec![c, h, w])?;
        let emb = g
            .value(out.embedding.expect("requested"))
            .clone()
            .reshape(vec![self.config.embed_dim, h, w])?;
        Ok((logits, emb))
    }

    /// Class probabilities for a `[N, in_channels, H, W]` batch without recording gradients.
    pub fn predict_probs(&self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(batch.clone());
        let out = self.forward(&mut g, xv, mode, false, None)?;
        softmax_channels(g.value(out.logits), false)
    }

    /// Eval-mode hard segmentation of a `[N, in_channels, H, W]` batch.
    pub fn hard_prediction(&self, batch: &Tensor<T>) -> Result<Vec<LabelMap>> {
        argmax_channels(&self.predict_probs(batch, Mode::Eval)?)
    }

    fn check_same_structure(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::StructureMismatch("parameter names differ".into()));
        }
        for (n, (a, b)) in self.names.iter().zip(self.params.iter().zip(&other.params)) {
            if a.shape() != b.shape() {
                return Err(Error::StructureMismatch(format!(
                    "{n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `theta_bar <- gamma * theta_bar + (1 - gamma) * theta` for every parameter;
/// running BN statistics are copied from the student.
pub fn ema_update<T: Scalar>(teacher: &mut SegModel<T>, student: &SegModel<T>, gamma: T) -> Result<()> {
    if !(gamma > T::zero() && gamma < T::one()) {
        return Err(Error::InvalidArgument(format!("EMA decay must lie in (0, 1), got {gamma}")));
    }
    teacher.check_same_structure(student)?;
    let keep = T::one() - gamma;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = gamma * *tv + keep * sv;
        }
    }
    teacher.running.clone_from(&student.running);
    Ok(())
}

/// EMA copy of a student network. Never touched by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel<T> {
    model: SegModel<T>,
    gamma: T,
}

impl<T: Scalar> TeacherModel<T> {
    pub fn from_student(student: &SegModel<T>, gamma: T) -> Result<Self> {
        if !(gamma > T::zero() && gamma < T::one()) {
            return Err(Error::InvalidArgument(format!("EMA decay must lie in (0, 1), got {gamma}")));
        }
        Ok(Self {
            model: student.clone(),
            gamma,
        })
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn model(&self) -> &SegModel<T> {
        &self.model
    }

    /// Direct access for checkpoint restore.
    pub fn model_mut(&mut self) -> &mut SegModel<T> {
        &mut self.model
    }

    pub fn update(&mut self, student: &SegModel<T>) -> Result<()> {
        ema_update(&mut self.model, student, self.gamma)
    }
}
