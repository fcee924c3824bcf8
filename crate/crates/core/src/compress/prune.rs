//! Magnitude pruning.

use crate::tensor::Tensor;

/// Zero the `floor(sparsity * n)` smallest-magnitude entries. Ties are broken
/// by position, so the result is deterministic. The returned bitmap is true
/// for every surviving entry.
pub fn prune(weights: &Tensor, sparsity: f64) -> (Tensor, Vec<bool>) {
    let n = weights.len();
    let k = ((sparsity.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut keep = vec![true; n];
    if k > 0 {
        let data = weights.data();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
        for &i in &order[..k] {
            keep[i] = false;
        }
    }
    let data = weights.data().iter().zip(&keep).map(|(&w, &k)| if k { w } else { 0.0 }).collect();
    (Tensor::new(weights.shape().to_vec(), data).expect("same shape"), keep)
}
