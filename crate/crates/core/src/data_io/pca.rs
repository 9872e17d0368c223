use nalgebra::{DMatrix, SymmetricEigen};

use crate::data_io::FeatureSet;
use crate::error::{FvError, Result};
use crate::matrix::Matrix;

/// Mean and top-`d` principal directions (rows, orthonormal, by descending
/// eigenvalue). No whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub basis: Matrix,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.rows()
    }

    /// Projects a single row.
    pub fn project(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.basis.row(r).iter().zip(x.iter().zip(&self.mean)).map(|(b, (v, m))| b * (v - m)).sum();
        }
    }
}

/// Fits PCA on the rows of `samples` and also returns the full eigenvalue
/// spectrum (descending), handy for explained-variance reporting.
pub fn pca_fit_with_spectrum(samples: &Matrix, d: usize) -> Result<(PcaModel, Vec<f64>)> {
    let (m, d0) = (samples.rows(), samples.cols());
    if d > d0 {
        return Err(FvError::Dimension(format!("target dimension {d} exceeds input dimension {d0}")));
    }
    if d == 0 {
        return Err(FvError::Dimension("target dimension must be positive".into()));
    }
    if m <= d {
        return Err(FvError::Dimension(format!("need more than {d} samples, got {m}")));
    }
    let mut mean = vec![0.0; d0];
    for row in samples.iter_rows() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);

    let mut cov = DMatrix::<f64>::zeros(d0, d0);
    for row in samples.iter_rows() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, mu)| v - mu).collect();
        for i in 0..d0 {
            for j in i..d0 {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d0 {
        for j in i..d0 {
            let v = cov[(i, j)] / (m - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d0).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Matrix::zeros(d, d0);
    for (r, &idx) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(idx);
        // Fix the sign so the largest-magnitude coordinate is positive.
        let pivot = (0..d0).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d0 {
            basis[(r, c)] = sign * col[c];
        }
    }
    let spectrum = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok((PcaModel { mean, basis }, spectrum))
}

pub fn pca_fit(samples: &Matrix, d: usize) -> Result<PcaModel> {
    pca_fit_with_spectrum(samples, d).map(|(m, _)| m)
}

pub fn pca_apply(model: &PcaModel, features: &FeatureSet) -> Result<FeatureSet> {
    if features.dim() != model.input_dim() {
        return Err(FvError::shape(format!(
            "PCA expects dimension {}, got {}",
            model.input_dim(),
            features.dim()
        )));
    }
    features.map_points(model.output_dim(), |x, out| model.project(x, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_matrix(m: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed, 0);
        Matrix::from_vec(m, d, (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        let x = random_matrix(200, 6, 1);
        let model = pca_fit(&x, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = model.basis.row(i).iter().zip(model.basis.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_variance_padding_is_lossless() {
        // 2D data embedded in 4D with two constant coordinates.
        let base = random_matrix(50, 2, 2);
        let mut rows = Vec::new();
        for r in base.iter_rows() {
            rows.push(vec![r[0], 3.0, r[1], -1.0]);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let model = pca_fit(&x, 2).unwrap();
        for row in x.iter_rows() {
            let mut z = [0.0; 2];
            model.project(row, &mut z);
            // reconstruct
            for c in 0..4 {
                let rec = model.mean[c] + z[0] * model.basis[(0, c)] + z[1] * model.basis[(1, c)];
                assert!((rec - row[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_maps_to_origin() {
        let x = random_matrix(30, 3, 3);
        let model = pca_fit(&x, 2).unwrap();
        let f = FeatureSet::from_rows(&[model.mean.clone()]).unwrap();
        let z = pca_apply(&model, &f).unwrap();
        assert!(z.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_model_is_idempotent() {
        let model = PcaModel { mean: vec![0.0; 3], basis: Matrix::identity(3) };
        let f = FeatureSet::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 4.0, 1.0]]).unwrap();
        let once = pca_apply(&model, &f).unwrap();
        assert_eq!(pca_apply(&model, &once).unwrap(), once);
        assert_eq!(once, f);
    }

    #[test]
    fn distances_preserved_in_span() {
        // Points constructed inside a 2D subspace of R^5.
        let u = [0.6, 0.0, 0.8, 0.0, 0.0];
        let v = [0.0, 1.0 / 2f64.sqrt(), 0.0, 0.0, 1.0 / 2f64.sqrt()];
        let coeffs = random_matrix(40, 2, 4);
        let rows: Vec<Vec<f64>> = coeffs
            .iter_rows()
            .map(|c| (0..5).map(|i| 1.0 + c[0] * u[i] + c[1] * v[i]).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let f = FeatureSet::from_matrix(x.clone()).unwrap();
        let z = pca_apply(&pca_fit(&x, 2).unwrap(), &f).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let d0: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let d1: f64 = z.point(i).iter().zip(z.point(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn target_dimension_too_large() {
        let x = random_matrix(10, 3, 5);
        assert!(matches!(pca_fit(&x, 4), Err(FvError::Dimension(_))));
    }
}
