//! Desk-scale stand-in for chest X-rays: a 128×128 noisy background with a
//! bright disc (pneumonia) or a dark disc (normal). The classes separate by
//! mean intensity alone, so a threshold classifier is perfect.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Sample, ScanId, SCAN_SIDE};
use crate::imaging::GrayImage;
use crate::metrics::Class;

pub fn disc_scan<R: Rng + ?Sized>(class: Class, rng: &mut R) -> GrayImage {
    let side = SCAN_SIDE as f64;
    let radius = rng.gen_range(24.0..40.0);
    let cx = rng.gen_range(radius..side - radius);
    let cy = rng.gen_range(radius..side - radius);
    let (lo, hi) = match class {
        Class::Pneumonia => (200u8, 255u8),
        Class::Normal => (0, 40),
    };
    let disc = rng.gen_range(lo..=hi) as f64;
    let background = rng.gen_range(100.0..120.0);
    let noise: Vec<f64> = (0..SCAN_SIDE * SCAN_SIDE).map(|_| rng.gen_range(-12.0..12.0)).collect();
    GrayImage::from_fn(SCAN_SIDE, SCAN_SIDE, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let base = if dx * dx + dy * dy <= radius * radius { disc } else { background };
        (base + noise[y * SCAN_SIDE + x]).round().clamp(0.0, 255.0) as u8
    })
}

/// `n` scans alternating normal/pneumonia, ids `syn<seed>-<index>`.
pub fn disc_dataset(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = if i % 2 == 0 { Class::Normal } else { Class::Pneumonia };
            let id = ScanId::new(format!("syn{seed}-{i:05}")).expect("valid id");
            Sample::new(id, disc_scan(class, &mut rng), class)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_by_mean() {
        let data = disc_dataset(200, 3);
        let (mut max_normal, mut min_pneu) = (f64::MIN, f64::MAX);
        for s in &data {
            let m = s.image.mean();
            match s.class {
                Class::Normal => max_normal = max_normal.max(m),
                Class::Pneumonia => min_pneu = min_pneu.min(m),
            }
        }
        assert!(max_normal < min_pneu, "{max_normal} vs {min_pneu}");
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(disc_dataset(6, 1), disc_dataset(6, 1));
        assert_ne!(disc_dataset(6, 1)[0].image, disc_dataset(6, 2)[0].image);
    }
}
