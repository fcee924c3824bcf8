use super::NnError;
use crate::tensor::{ShapeError, Tensor};

/// Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before the log.
pub const CLAMP_EPS: f64 = 1e-7;

pub(crate) fn sample_crossentropy(probs: &[f64], target: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| y * p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS).ln())
        .sum::<f64>()
}

/// Mean over the batch of `-sum(y * ln p)`.
pub fn categorical_crossentropy(pred: &Tensor, onehot: &Tensor) -> Result<f64, NnError> {
    if pred.shape() != onehot.shape() || pred.shape().len() != 2 {
        return Err(ShapeError::Mismatch { expected: pred.shape().to_vec(), found: onehot.shape().to_vec() }.into());
    }
    let (n, k) = (pred.shape()[0], pred.shape()[1]);
    if n == 0 {
        return Err(NnError::EmptyInput);
    }
    let total: f64 = pred
        .data()
        .chunks(k)
        .zip(onehot.data().chunks(k))
        .map(|(p, y)| sample_crossentropy(p, y))
        .sum();
    Ok(total / n as f64)
}

/// One-hot targets `(n, classes)` from class indices.
pub fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("sized from labels")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let l = categorical_crossentropy(&t(vec![1, 2], &[1.0, 0.0]), &t(vec![1, 2], &[1.0, 0.0])).unwrap();
        assert!(l <= 1e-6);
    }

    #[test]
    fn uniform_prediction_is_ln2() {
        let l = categorical_crossentropy(&t(vec![1, 2], &[0.5, 0.5]), &t(vec![1, 2], &[0.0, 1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_is_mean_of_samples() {
        let a = categorical_crossentropy(&t(vec![1, 2], &[0.9, 0.1]), &t(vec![1, 2], &[1.0, 0.0])).unwrap();
        let b = categorical_crossentropy(&t(vec![1, 2], &[0.3, 0.7]), &t(vec![1, 2], &[1.0, 0.0])).unwrap();
        let both = categorical_crossentropy(
            &t(vec![2, 2], &[0.9, 0.1, 0.3, 0.7]),
            &t(vec![2, 2], &[1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let r = categorical_crossentropy(&t(vec![1, 2], &[0.5, 0.5]), &t(vec![2, 1], &[1.0, 0.0]));
        assert!(matches!(r, Err(NnError::Shape(_))));
    }
}
