use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, FeatureSet, LabeledImage};
use crate::error::{FvError, Result};
use crate::rng;

pub const SYNTHETIC_POINTS_PER_IMAGE: usize = 32;

const SPREAD: f64 = 0.3;
const CORRELATION: f64 = 0.9;
const LIMIT: f64 = 0.95;

/// Two classes of 2D "images" whose points are zero-mean Gaussians with
/// correlation `+ρ` (label `+1`) or `-ρ` (label `-1`).
///
/// The classes are mirror images under `(a, b) ↦ (a, -b)`, so both have the
/// same per-axis marginals and a diagonal mixture sees the same support for
/// each. Points are clamped to `±0.95`. Images alternate between classes.
pub fn make_synthetic_2d(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class < 10 {
        return Err(FvError::InvalidParameter(format!("need at least 10 images per class, got {n_per_class}")));
    }
    let mut r = rng::seeded(seed, rng::stream::SYNTHETIC);
    let t = SYNTHETIC_POINTS_PER_IMAGE;
    let cross = (1.0 - CORRELATION * CORRELATION).sqrt();
    let mut items = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label: i8 = if i % 2 == 0 { 1 } else { -1 };
        let mut values = Vec::with_capacity(2 * t);
        for _ in 0..t {
            let z1: f64 = StandardNormal.sample(&mut r);
            let z2: f64 = StandardNormal.sample(&mut r);
            let a = SPREAD * z1;
            let b = SPREAD * f64::from(label) * (CORRELATION * z1 + cross * z2);
            values.push(a.clamp(-LIMIT, LIMIT));
            values.push(b.clamp(-LIMIT, LIMIT));
        }
        items.push(LabeledImage {
            id: format!("syn{i:05}"),
            features: Arc::new(FeatureSet::new(t, 2, values)?),
            labels: vec![label],
        });
    }
    Dataset::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_correlation(ds: &Dataset, label: i8) -> f64 {
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for item in ds.items().iter().filter(|i| i.labels[0] == label) {
            for p in item.features.points() {
                sab += p[0] * p[1];
                saa += p[0] * p[0];
                sbb += p[1] * p[1];
            }
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn balanced_and_deterministic() {
        let a = make_synthetic_2d(20, 1).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a.class_labels(0).iter().filter(|&&y| y > 0.0).count(), 20);
        let b = make_synthetic_2d(20, 1).unwrap();
        for (x, y) in a.items().iter().zip(b.items()) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.labels, y.labels);
        }
        assert!(a.items().iter().all(|i| i.features.len() == SYNTHETIC_POINTS_PER_IMAGE));
    }

    #[test]
    fn classes_have_opposite_correlation() {
        let ds = make_synthetic_2d(50, 3).unwrap();
        assert!(sample_correlation(&ds, 1) > 0.8);
        assert!(sample_correlation(&ds, -1) < -0.8);
        assert!(ds.items().iter().all(|i| i.features.as_slice().iter().all(|v| v.abs() <= LIMIT)));
    }

    #[test]
    fn too_small_rejected() {
        assert!(make_synthetic_2d(9, 0).is_err());
    }
}
