//! SGD (with optional momentum) and Adam.

use serde::{Deserialize, Serialize};

use super::network::Gradients;
use super::NnError;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub trait Optimizer {
    fn step(&mut self, weights: &mut [Tensor], grads: &Gradients) -> Result<(), NnError>;
}

fn check(weights: &[Tensor], grads: &Gradients) -> Result<(), NnError> {
    if weights.len() != grads.0.len() {
        return Err(NnError::Architecture(format!(
            "{} weight tensors but {} gradients",
            weights.len(),
            grads.0.len()
        )));
    }
    for (w, g) in weights.iter().zip(&grads.0) {
        if w.shape() != g.shape() {
            return Err(ShapeError::Mismatch { expected: w.shape().to_vec(), found: g.shape().to_vec() }.into());
        }
    }
    if !grads.is_finite() {
        return Err(NnError::Diverged("non-finite gradient".into()));
    }
    Ok(())
}

/// Inverse-time learning-rate decay: `lr / (1 + decay * iterations)`.
fn decayed(lr: f64, decay: f64, iterations: u64) -> f64 {
    lr / (1.0 + decay * iterations as f64)
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    velocity: Vec<Tensor>,
    iterations: u64,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, lr_decay: 0.0, velocity: Vec::new(), iterations: 0 }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, weights: &mut [Tensor], grads: &Gradients) -> Result<(), NnError> {
        check(weights, grads)?;
        let lr = decayed(self.learning_rate, self.lr_decay, self.iterations);
        if self.momentum == 0.0 {
            for (w, g) in weights.iter_mut().zip(&grads.0) {
                for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                    *wi -= lr * gi;
                }
            }
        } else {
            if self.velocity.is_empty() {
                self.velocity = weights.iter().map(|w| Tensor::zeros(w.shape().to_vec())).collect();
            }
            for ((w, g), v) in weights.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
                for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vi = self.momentum * *vi - lr * gi;
                    *wi += *vi;
                }
            }
        }
        self.iterations += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon: 1e-7, lr_decay: 0.0, m: Vec::new(), v: Vec::new(), t: 0 }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, weights: &mut [Tensor], grads: &Gradients) -> Result<(), NnError> {
        check(weights, grads)?;
        if self.m.is_empty() {
            self.m = weights.iter().map(|w| Tensor::zeros(w.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        let lr = decayed(self.learning_rate, self.lr_decay, self.t);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((w, g), m), v) in weights.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
