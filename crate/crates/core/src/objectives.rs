//! Segmentation losses on probability fields and the ramp-up schedule.
//!
//! All tensors are `[N, C, H, W]`; the differentiable losses are built on a
//! [`Graph`] so their gradients come from the same tape as the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{argmax_channels, one_hot, LabelMap};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const LOG_FLOOR: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1e-5;

/// Mean over pixels of `-log P[y]`, with the log floored.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[LabelMap]) -> Result<Var> {
    let (n, c, h, w) = g.value(probs).dims4()?;
    check_labels(labels, n, h, w)?;
    let y = g.constant(one_hot(labels, c)?);
    let logp = g.log(probs, T::lit(LOG_FLOOR))?;
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked)?;
    g.scale(total, -T::one() / T::from_usize(n * h * w).expect("representable"))
}

fn check_labels(labels: &[LabelMap], n: usize, h: usize, w: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", &[n], &[labels.len()]));
    }
    if let Some(m) = labels.iter().find(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::shape("labels", &[h, w], &[m.height(), m.width()]));
    }
    Ok(())
}

/// `1 - mean_c (2 sum(P Y) + s) / (sum(P) + sum(Y) + s)`, with sums over the
/// batch and all pixels. Classes below `first_class` are left out of the mean.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var, first_class: usize) -> Result<Var> {
    if g.shape(probs) != g.shape(target) {
        return Err(Error::shape("dice_loss", g.shape(probs), g.shape(target)));
    }
    let (_, c, _, _) = g.value(probs).dims4()?;
    if first_class >= c {
        return Err(Error::InvalidArgument(format!("dice over classes {first_class}.. of {c}")));
    }
    let s = T::lit(DICE_SMOOTH);
    let py = g.mul(probs, target)?;
    let inter = g.channel_sum(py)?;
    let sp = g.channel_sum(probs)?;
    let sy = g.channel_sum(target)?;
    let num = g.scale(inter, T::lit(2.0))?;
    let num = g.add_scalar(num, s)?;
    let den = g.add(sp, sy)?;
    let den = g.add_scalar(den, s)?;
    let mut ratio = g.div(num, den)?;
    if first_class > 0 {
        ratio = g.narrow0(ratio, first_class, c - first_class)?;
    }
    let m = g.mean(ratio)?;
    let neg = g.scale(m, -T::one())?;
    g.add_scalar(neg, T::one())
}

/// Dice against hard labels.
pub fn dice_loss_labels<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &[LabelMap],
    first_class: usize,
) -> Result<Var> {
    let (n, c, h, w) = g.value(probs).dims4()?;
    check_labels(labels, n, h, w)?;
    let y = g.constant(one_hot(labels, c)?);
    dice_loss(g, probs, y, first_class)
}

/// `(ce + dice) / 2`.
pub fn supervised_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &[LabelMap],
    first_class: usize,
) -> Result<Var> {
    let ce = ce_loss(g, probs, labels)?;
    let dice = dice_loss_labels(g, probs, labels, first_class)?;
    let sum = g.add(ce, dice)?;
    g.scale(sum, T::lit(0.5))
}

/// Dice of the student's probabilities against the arg max of the teacher's.
/// The teacher field is a plain tensor, so no gradient can reach it.
pub fn consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_probs: Var,
    teacher_probs: &Tensor<T>,
    first_class: usize,
) -> Result<Var> {
    if g.shape(student_probs) != teacher_probs.shape() {
        return Err(Error::shape("consistency_loss", teacher_probs.shape(), g.shape(student_probs)));
    }
    let pseudo = argmax_channels(teacher_probs)?;
    dice_loss_labels(g, student_probs, &pseudo, first_class)
}

/// Gaussian ramp-up `w_max * exp(-5 (1 - min(t, t_ramp) / t_ramp)^2)`.
pub fn ramp_up(t: u64, w_max: f64, t_ramp: u64) -> f64 {
    let t_ramp = t_ramp.max(1);
    let phase = 1.0 - t.min(t_ramp) as f64 / t_ramp as f64;
    w_max * (-5.0 * phase * phase).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub w_max: f64,
    /// Ramp length in iterations; `None` means 40% of the run.
    pub t_ramp: Option<u64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            w_max: 1.0,
            t_ramp: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.w_max >= 0.0) {
            return Err(Error::Config("alpha, beta and w_max must be nonnegative".into()));
        }
        if self.t_ramp == Some(0) {
            return Err(Error::Config("t_ramp must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ramp_length(&self, iterations: u64) -> u64 {
        self.t_ramp.unwrap_or((iterations * 2 / 5).max(1))
    }
}

/// Scalar loss components of one step, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sup: f64,
    pub con: f64,
    pub ctr: f64,
    /// Strong-to-weak pixel dice, weighted like `con`.
    pub s2w: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossParts {
    /// Fills `total = sup + lambda (alpha (con + s2w) + beta ctr)`, rejecting
    /// non-finite parts.
    pub fn compose(mut self, alpha: f64, beta: f64, iteration: u64) -> Result<Self> {
        for (component, v) in [("sup", self.sup), ("con", self.con), ("ctr", self.ctr), ("s2w", self.s2w)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { component, iteration });
            }
        }
        self.total = self.sup + self.lambda * (alpha * (self.con + self.s2w) + beta * self.ctr);
        if !self.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "total",
                iteration,
            });
        }
        Ok(self)
    }
}

/// Graph form of the total: `sup + lambda (alpha sum(con) + beta ctr)`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    sup: Var,
    con: &[Var],
    ctr: Option<Var>,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = sup;
    for &c in con {
        let term = g.scale(c, T::lit(lambda * alpha))?;
        total = g.add(total, term)?;
    }
    if let Some(c) = ctr {
        let term = g.scale(c, T::lit(lambda * beta))?;
        total = g.add(total, term)?;
    }
    Ok(total)
}
