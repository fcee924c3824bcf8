//! Codebook quantization by one-dimensional k-means.

const MAX_ITERS: usize = 50;

/// Shared-value codebook and the per-weight index into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// Sorted ascending, no duplicates.
    pub codebook: Vec<f32>,
    pub indices: Vec<u32>,
}

impl Quantized {
    pub fn reconstruct(&self) -> Vec<f64> {
        self.indices.iter().map(|&i| self.codebook[i as usize] as f64).collect()
    }

    pub fn mse(&self, original: &[f64]) -> f64 {
        if original.is_empty() {
            return 0.0;
        }
        let r = self.reconstruct();
        original.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / original.len() as f64
    }
}

/// Cluster `values` into at most `2^bits` centroids.
///
/// Centroids start linearly spaced over `[min, max]` and are refined by
/// Lloyd iterations; unused centroids are dropped. When the input already
/// has no more than `2^bits` distinct values the codebook is exactly those
/// values. Centroids are stored as `f32`.
pub fn quantize(values: &[f64], bits: u8) -> Quantized {
    assert!((1..=16).contains(&bits), "codebook bits must be in 1..=16");
    if values.is_empty() {
        return Quantized { codebook: Vec::new(), indices: Vec::new() };
    }
    let k = 1usize << bits;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();

    let centroids = if distinct.len() <= k {
        distinct
    } else {
        lloyd(&sorted, k)
    };
    let mut codebook: Vec<f32> = centroids.iter().map(|&c| c as f32).collect();
    codebook.sort_by(f32::total_cmp);
    codebook.dedup();
    let indices = values.iter().map(|&v| nearest(&codebook, v) as u32).collect();
    let mut q = Quantized { codebook, indices };
    drop_unused(&mut q);
    q
}

/// Lloyd's algorithm on sorted data: assignment is a sweep over the
/// midpoints between consecutive centroids.
fn lloyd(sorted: &[f64], k: usize) -> Vec<f64> {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let mut c: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
    // prefix sums make each centroid update O(1) given its range
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for &v in sorted {
        prefix.push(prefix.last().unwrap() + v);
    }
    for _ in 0..MAX_ITERS {
        let mut next = c.clone();
        let mut start = 0;
        for j in 0..k {
            let end = if j + 1 == k {
                sorted.len()
            } else {
                let mid = 0.5 * (c[j] + c[j + 1]);
                start + sorted[start..].partition_point(|&v| v <= mid)
            };
            if end > start {
                next[j] = (prefix[end] - prefix[start]) / (end - start) as f64;
            }
            start = end;
        }
        // keep order so the midpoint sweep stays valid
        next.sort_by(f64::total_cmp);
        if next == c {
            break;
        }
        c = next;
    }
    c
}

/// Index of the closest codebook entry; ties go to the lower entry.
pub(crate) fn nearest(codebook: &[f32], v: f64) -> usize {
    let i = codebook.partition_point(|&c| (c as f64) < v);
    if i == 0 {
        return 0;
    }
    if i == codebook.len() {
        return i - 1;
    }
    let (a, b) = (codebook[i - 1] as f64, codebook[i] as f64);
    if v - a <= b - v {
        i - 1
    } else {
        i
    }
}

fn drop_unused(q: &mut Quantized) {
    let mut used = vec![false; q.codebook.len()];
    for &i in &q.indices {
        used[i as usize] = true;
    }
    if used.iter().all(|&u| u) {
        return;
    }
    let mut remap = vec![0u32; used.len()];
    let mut book = Vec::new();
    for (i, &u) in used.iter().enumerate() {
        if u {
            remap[i] = book.len() as u32;
            book.push(q.codebook[i]);
        }
    }
    for i in &mut q.indices {
        *i = remap[*i as usize];
    }
    q.codebook = book;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Nearest of 2^bits evenly spaced levels over [min, max].
    fn uniform_mse(values: &[f64], bits: u8) -> f64 {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k = (1usize << bits) as f64;
        let step = (hi - lo) / (k - 1.0);
        values
            .iter()
            .map(|&v| {
                let level = lo + ((v - lo) / step).round() * step;
                (v - level).powi(2)
            })
            .sum::<f64>()
            / values.len() as f64
    }

    #[test]
    fn few_distinct_values_are_exact() {
        let v = [0.5, -1.25, 0.5, 3.0, -1.25];
        let q = quantize(&v, 2);
        assert_eq!(q.codebook, [-1.25, 0.5, 3.0]);
        assert_eq!(q.reconstruct(), v);
    }

    #[test]
    fn all_equal_gives_single_entry() {
        let q = quantize(&[0.3; 50], 8);
        assert_eq!(q.codebook.len(), 1);
        assert!(q.indices.iter().all(|&i| i == 0));
    }

    #[test]
    fn empty_input_empty_codebook() {
        assert!(quantize(&[], 4).codebook.is_empty());
    }

    #[test]
    fn beats_uniform_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // gaussian-ish weights via the sum of uniforms
        let v: Vec<f64> = (0..1000).map(|_| (0..4).map(|_| rng.gen_range(-0.5..0.5)).sum::<f64>() * 0.1).collect();
        let q = quantize(&v, 8);
        assert!(q.codebook.len() <= 256);
        assert!(q.mse(&v) <= uniform_mse(&v, 8) * (1.0 + 1e-9), "{} vs {}", q.mse(&v), uniform_mse(&v, 8));
    }

    proptest! {
        #[test]
        fn error_non_increasing_in_bits(seed in any::<u64>(), n in 20usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * rng.gen_range(0.0..1.0)).collect();
            let mut prev = f64::INFINITY;
            for bits in 1..=6 {
                let e = quantize(&v, bits).mse(&v);
                prop_assert!(e <= prev * (1.0 + 1e-6) + 1e-12, "bits {} mse {} prev {}", bits, e, prev);
                prev = e;
            }
        }

        #[test]
        fn indices_point_at_nearest_centroid(v in prop::collection::vec(-5.0f64..5.0, 1..200), bits in 1u8..6) {
            let q = quantize(&v, bits);
            prop_assert!(q.codebook.len() <= 1 << bits);
            prop_assert!(q.codebook.windows(2).all(|w| w[0] < w[1]));
            for (&x, &i) in v.iter().zip(&q.indices) {
                let best = q.codebook.iter().map(|&c| (c as f64 - x).abs()).fold(f64::INFINITY, f64::min);
                prop_assert!(((q.codebook[i as usize] as f64) - x).abs() <= best + 1e-12);
            }
        }
    }
}
