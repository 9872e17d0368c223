//! PCA against a cyclic Jacobi eigensolver written independently here.

use fvlayer::data_io::{pca_apply, pca_fit_with_spectrum};
use fvlayer::{FeatureSet, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn captured_variance_matches_jacobi_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (n, d0, d) = (400, 7, 3);
    let mix: Vec<Vec<f64>> = (0..d0).map(|_| (0..d0).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d0).map(|i| r.random_range(-1.0..1.0) * (i + 1) as f64).collect();
            (0..d0).map(|c| 2.0 + (0..d0).map(|i| z[i] * mix[i][c]).sum::<f64>()).collect()
        })
        .collect();

    let mean: Vec<f64> = (0..d0).map(|c| rows.iter().map(|x| x[c]).sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..d0)
        .map(|i| (0..d0).map(|j| rows.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1) as f64).collect())
        .collect();
    let oracle = jacobi_eigenvalues(cov);

    let samples = Matrix::from_rows(&rows).unwrap();
    let (model, spectrum) = pca_fit_with_spectrum(&samples, d).unwrap();
    for (a, b) in spectrum.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-9 * oracle[0], "{spectrum:?} vs {oracle:?}");
    }
    let total: f64 = oracle.iter().sum();
    let captured: f64 = oracle[..d].iter().sum::<f64>() / total;

    // Variance of the projected data is the captured share of the total.
    let projected = pca_apply(&model, &FeatureSet::from_rows(&rows).unwrap()).unwrap();
    let proj_var: f64 = projected.points().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (n - 1) as f64;
    assert!((proj_var / total - captured).abs() < 1e-10, "{} vs {captured}", proj_var / total);

    for i in 0..d {
        for j in 0..d {
            let dot: f64 = model.basis.row(i).iter().zip(model.basis.row(j)).map(|(a, b)| a * b).sum();
            assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }
}
