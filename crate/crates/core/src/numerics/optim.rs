use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// One plain SGD update: `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T, weight_decay: T) -> Result<()> {
    check_hyper(lr, weight_decay)?;
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * (gv + weight_decay * *pv);
        }
    }
    Ok(())
}

fn check_hyper<T: Scalar>(lr: T, weight_decay: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if !(weight_decay >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "weight decay must be non-negative, got {weight_decay}"
        )));
    }
    Ok(())
}

fn check_grads<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum.
///
/// With `momentum == 0` every step is exactly [`sgd_step`]. Otherwise
/// `v <- momentum * v + g + weight_decay * p` and `p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub weight_decay: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(weight_decay: T, momentum: T) -> Self {
        Self {
            weight_decay,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
        if self.momentum == T::zero() {
            return sgd_step(params, grads, lr, self.weight_decay);
        }
        check_hyper(lr, self.weight_decay)?;
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    /// Momentum buffers, empty until the first momentum step.
    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }
}
