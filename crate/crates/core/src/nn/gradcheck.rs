//! Central finite-difference check of the analytic gradients.
//!
//! Errors are measured per tensor as `|g_analytic - g_numeric|₂ /
//! max(|g_analytic|₂, |g_numeric|₂)`, which stays meaningful when single
//! entries are near zero.

use super::loss::{categorical_crossentropy, onehot};
use super::network::Network;
use super::NnError;
use crate::par::Exec;
use crate::tensor::Tensor;

/// Relative error per parameter tensor, and for the input gradient of the
/// first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub params: Vec<f64>,
    pub input: f64,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.params.iter().copied().fold(self.input, f64::max)
    }
}

fn relative(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn check_gradients(net: &Network, batch: &Tensor, labels: &[usize], h: f64) -> Result<GradCheck, NnError> {
    let targets = onehot(labels, net.output_len());
    let (_, grads) = net.loss_and_gradients(batch, &targets, Exec::Sequential)?;
    let loss_of = |n: &Network, b: &Tensor| -> Result<f64, NnError> {
        categorical_crossentropy(&n.forward_with(b, Exec::Sequential)?, &targets)
    };

    let mut params = Vec::with_capacity(net.params().len());
    let mut probe = net.clone();
    for (t, g) in grads.0.iter().enumerate() {
        let mut numeric = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let orig = probe.params()[t].data()[i];
            probe.params_mut()[t].data_mut()[i] = orig + h;
            let up = loss_of(&probe, batch)?;
            probe.params_mut()[t].data_mut()[i] = orig - h;
            let down = loss_of(&probe, batch)?;
            probe.params_mut()[t].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        params.push(relative(g.data(), &numeric));
    }

    let first = batch.unstack().into_iter().next().ok_or(NnError::EmptyInput)?;
    let (_, analytic) = net.input_gradient(&first, labels[0])?;
    let single = onehot(&labels[..1], net.output_len());
    let single_loss = |x: &Tensor| -> Result<f64, NnError> {
        let b = Tensor::stack(std::slice::from_ref(x))?;
        categorical_crossentropy(&net.forward_with(&b, Exec::Sequential)?, &single)
    };
    let mut x = first.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = single_loss(&x)?;
        x.data_mut()[i] = orig - h;
        let down = single_loss(&x)?;
        x.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(GradCheck { params, input: relative(analytic.data(), &numeric) })
}
