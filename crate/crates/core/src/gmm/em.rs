use log::warn;
use rand::Rng;

use super::{GmmParams, DEFAULT_EPSILON};
use crate::error::{FvError, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    /// Relative change of the mean log-likelihood that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub epsilon: f64,
    /// Seeds the stream used to re-seed starved components.
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { tol: 1e-6, max_iter: 200, epsilon: DEFAULT_EPSILON, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct EmReport {
    pub params: GmmParams,
    /// Mean per-point log-likelihood, one entry per E-step; the last entry
    /// belongs to `params`.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub reseeded: usize,
}

/// Expectation-maximization for a diagonal mixture, starting from `init`.
pub fn em_fit(points: &Matrix, init: &GmmParams, opts: &EmOptions) -> Result<EmReport> {
    init.validate()?;
    let (n, dim, k) = (points.rows(), points.cols(), init.components());
    if n == 0 {
        return Err(FvError::EmptyInput("no points to fit".into()));
    }
    if dim != init.dim() {
        return Err(FvError::shape(format!("points have dimension {dim}, mixture has {}", init.dim())));
    }

    let mut rng = rng::seeded(opts.seed, rng::stream::EM_RESEED);
    let global_var = {
        let mut mean = vec![0.0; dim];
        for p in points.iter_rows() {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; dim];
        for p in points.iter_rows() {
            for d in 0..dim {
                var[d] += (p[d] - mean[d]).powi(2) / n as f64;
            }
        }
        var.into_iter().map(|v| v.max(opts.epsilon)).collect::<Vec<_>>()
    };

    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeded = 0;
    let mut resp = Matrix::zeros(n, k);
    for iter in 0..=opts.max_iter {
        let mut ll = 0.0;
        for t in 0..n {
            ll += params.posterior_row(points.row(t), resp.row_mut(t));
        }
        ll /= n as f64;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < opts.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iter == opts.max_iter {
            break;
        }

        // M-step
        let mut mass = vec![0.0; k];
        let mut means = Matrix::zeros(k, dim);
        for t in 0..n {
            let x = points.row(t);
            for c in 0..k {
                let g = resp[(t, c)];
                mass[c] += g;
                for (m, v) in means.row_mut(c).iter_mut().zip(x) {
                    *m += g * v;
                }
            }
        }
        for c in 0..k {
            if mass[c] >= 1e-12 {
                means.row_mut(c).iter_mut().for_each(|m| *m /= mass[c]);
            }
        }
        let mut variances = Matrix::zeros(k, dim);
        for t in 0..n {
            let x = points.row(t);
            for c in 0..k {
                let g = resp[(t, c)];
                for d in 0..dim {
                    let diff = x[d] - means[(c, d)];
                    variances[(c, d)] += g * diff * diff;
                }
            }
        }
        let mut weights = vec![0.0; k];
        for c in 0..k {
            if mass[c] < 1e-12 {
                let pick = rng.random_range(0..n);
                warn!("EM component {c} is empty (mass {:.3e}); re-seeding at point {pick}", mass[c]);
                reseeded += 1;
                means.row_mut(c).copy_from_slice(points.row(pick));
                variances.row_mut(c).copy_from_slice(&global_var);
                weights[c] = 1.0 / n as f64;
            } else {
                for v in variances.row_mut(c) {
                    *v = (*v / mass[c]).max(opts.epsilon);
                }
                weights[c] = mass[c] / n as f64;
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        params = GmmParams { weights, means, variances };
    }
    params.validate().map_err(|e| FvError::Numeric(format!("EM produced an invalid mixture: {e}")))?;
    Ok(EmReport { params, log_likelihood: trace, converged, reseeded })
}
