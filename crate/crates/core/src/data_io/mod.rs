//! Descriptor sets, datasets, preprocessing and on-disk formats.

mod format;
mod pca;
mod synthetic;

pub use format::{
    decode_checkpoint, decode_featureset, decode_pca, encode_checkpoint, encode_featureset,
    encode_pca, parse_labels, read_checkpoint, read_featureset, read_labels, read_pca, write_checkpoint,
    write_featureset, write_labels, write_pca, Checkpoint, LabelRow,
};
pub use pca::{pca_apply, pca_fit, pca_fit_with_spectrum, PcaModel};
pub use synthetic::{make_synthetic_2d, SYNTHETIC_POINTS_PER_IMAGE};

use std::sync::Arc;

use rand::seq::index;

use crate::error::{FvError, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Default number of descriptors kept per image.
pub const DEFAULT_SUBSAMPLE: usize = 10_000;

/// The local descriptors of one image: `T` rows of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet(Matrix);

impl FeatureSet {
    pub fn new(points: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_matrix(Matrix::from_vec(points, dim, values)?)
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(FvError::EmptyInput("feature set has no points".into()));
        }
        if m.cols() == 0 {
            return Err(FvError::EmptyInput("feature set has zero dimension".into()));
        }
        if !m.is_finite() {
            return Err(FvError::InvalidParameter("feature set contains non-finite values".into()));
        }
        Ok(FeatureSet(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_matrix(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    /// Always false: a feature set holds at least one point.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn point(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.0.iter_rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// Applies `f` to every point, producing a set of possibly different
    /// dimension.
    pub fn map_points(&self, out_dim: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Self> {
        let mut out = Matrix::zeros(self.len(), out_dim);
        for t in 0..self.len() {
            f(self.point(t), out.row_mut(t));
        }
        Self::from_matrix(out)
    }
}

/// One training or test image: its descriptors and a ±1 label per class.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub features: Arc<FeatureSet>,
    pub labels: Vec<i8>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(items: Vec<LabeledImage>) -> Result<Self> {
        if let Some(first) = items.first() {
            let dim = first.features.dim();
            let classes = first.labels.len();
            for item in &items {
                if item.features.dim() != dim {
                    return Err(FvError::shape(format!(
                        "image {} has dimension {}, expected {dim}",
                        item.id,
                        item.features.dim()
                    )));
                }
                if item.labels.len() != classes {
                    return Err(FvError::shape(format!(
                        "image {} has {} labels, expected {classes}",
                        item.id,
                        item.labels.len()
                    )));
                }
                if item.labels.iter().any(|&y| y != 1 && y != -1) {
                    return Err(FvError::InvalidParameter(format!(
                        "image {} has a label outside {{-1, +1}}",
                        item.id
                    )));
                }
            }
        }
        Ok(Dataset { items })
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.features.dim())
    }

    pub fn num_classes(&self) -> usize {
        self.items.first().map_or(0, |i| i.labels.len())
    }

    /// Labels of class `c` across all images.
    pub fn class_labels(&self, c: usize) -> Vec<f64> {
        self.items.iter().map(|i| f64::from(i.labels[c])).collect()
    }

    /// Splits off every `every`-th image (starting at `offset`) as a held-out set.
    pub fn split_every(&self, every: usize, offset: usize) -> (Dataset, Dataset) {
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        for (i, item) in self.items.iter().enumerate() {
            if every > 0 && i % every == offset % every {
                held.push(item.clone());
            } else {
                keep.push(item.clone());
            }
        }
        (Dataset { items: keep }, Dataset { items: held })
    }

    /// Replaces every image's descriptors through `f`.
    pub fn map_features(&self, mut f: impl FnMut(&FeatureSet) -> Result<FeatureSet>) -> Result<Dataset> {
        let items = self
            .items
            .iter()
            .map(|item| {
                Ok(LabeledImage {
                    id: item.id.clone(),
                    features: Arc::new(f(&item.features)?),
                    labels: item.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(items)
    }
}

/// Draws `n` points uniformly without replacement; the full set when `n >= T`.
/// Selected points keep their original relative order.
pub fn subsample(features: &FeatureSet, n: usize, seed: u64) -> FeatureSet {
    if n == 0 || n >= features.len() {
        return features.clone();
    }
    let mut rng = rng::seeded(seed, rng::stream::SUBSAMPLE);
    let mut picked = index::sample(&mut rng, features.len(), n).into_vec();
    picked.sort_unstable();
    let dim = features.dim();
    let mut out = Matrix::zeros(n, dim);
    for (row, &t) in picked.iter().enumerate() {
        out.row_mut(row).copy_from_slice(features.point(t));
    }
    FeatureSet(out)
}

/// Per-coordinate affine map onto `[-1, 1]` fitted by min/max.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<'a>(sets: impl IntoIterator<Item = &'a FeatureSet>) -> Result<Self> {
        let mut scaler: Option<MinMaxScaler> = None;
        for set in sets {
            let s = scaler.get_or_insert_with(|| MinMaxScaler {
                min: vec![f64::INFINITY; set.dim()],
                max: vec![f64::NEG_INFINITY; set.dim()],
            });
            if set.dim() != s.min.len() {
                return Err(FvError::shape("feature sets disagree on dimension"));
            }
            for p in set.points() {
                for (d, &v) in p.iter().enumerate() {
                    s.min[d] = s.min[d].min(v);
                    s.max[d] = s.max[d].max(v);
                }
            }
        }
        scaler.ok_or_else(|| FvError::EmptyInput("no feature sets to fit".into()))
    }

    /// Constant coordinates map to 0.
    pub fn apply(&self, set: &FeatureSet) -> Result<FeatureSet> {
        if set.dim() != self.min.len() {
            return Err(FvError::shape("scaler dimension mismatch"));
        }
        set.map_points(set.dim(), |p, out| {
            for d in 0..p.len() {
                let range = self.max[d] - self.min[d];
                out[d] = if range > 0.0 { 2.0 * (p[d] - self.min[d]) / range - 1.0 } else { 0.0 };
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: usize, d: usize) -> FeatureSet {
        FeatureSet::new(t, d, (0..t * d).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn subsample_identity_when_n_covers_set() {
        let f = grid(10, 3);
        assert_eq!(subsample(&f, 10, 1), f);
        assert_eq!(subsample(&f, 50, 1), f);
    }

    #[test]
    fn subsample_is_deterministic() {
        let f = grid(100, 2);
        assert_eq!(subsample(&f, 17, 9), subsample(&f, 17, 9));
        assert_eq!(subsample(&f, 17, 9).len(), 17);
    }

    #[test]
    fn subsample_selects_uniformly() {
        // Monte Carlo: each of T rows is picked with frequency n/T.
        let (t, n, trials) = (20usize, 5usize, 1000u64);
        let f = FeatureSet::new(t, 1, (0..t).map(|i| i as f64).collect()).unwrap();
        let mut counts = vec![0usize; t];
        for seed in 0..trials {
            for p in subsample(&f, n, seed).points() {
                counts[p[0] as usize] += 1;
            }
        }
        let expected = n as f64 / t as f64;
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - expected).abs() <= 0.05, "freq {freq} vs {expected}");
        }
    }

    #[test]
    fn empty_and_non_finite_sets_rejected() {
        assert!(FeatureSet::new(0, 2, vec![]).is_err());
        assert!(FeatureSet::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn minmax_maps_onto_unit_box() {
        let f = FeatureSet::from_rows(&[vec![0.0, 5.0], vec![10.0, 5.0], vec![5.0, 5.0]]).unwrap();
        let s = MinMaxScaler::fit([&f]).unwrap();
        let g = s.apply(&f).unwrap();
        assert_eq!(g.point(0), &[-1.0, 0.0]);
        assert_eq!(g.point(1), &[1.0, 0.0]);
        assert_eq!(g.point(2), &[0.0, 0.0]);
    }

    #[test]
    fn dataset_rejects_mixed_dimensions() {
        let a = LabeledImage { id: "a".into(), features: Arc::new(grid(2, 2)), labels: vec![1] };
        let b = LabeledImage { id: "b".into(), features: Arc::new(grid(2, 3)), labels: vec![-1] };
        assert!(Dataset::new(vec![a, b]).is_err());
    }
}
