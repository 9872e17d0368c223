//! Derivatives of the soft assignments `γ_k(x_t)`.
//!
//! These materialize full per-point tensors and exist for gradient checking
//! and small diagnostics; the training path never builds them.

use super::{check_dims, GmmParams, PosteriorMatrix};
use crate::data_io::FeatureSet;
use crate::error::Result;
use crate::matrix::Matrix;

/// `∂γ_k(x_t)/∂[x_t]_e` for every point: one K×D matrix per point.
///
/// `∂γ_k/∂x = γ_k (-β_k + Σ_n β_n γ_n)` with `β_k = (x - μ_k) / σ²_k`.
pub fn posterior_grad_input(
    features: &FeatureSet,
    params: &GmmParams,
    gamma: &PosteriorMatrix,
) -> Result<Vec<Matrix>> {
    check_dims(features, params)?;
    gamma.check(features, params)?;
    let (k_count, dim) = (params.components(), params.dim());
    let mut out = Vec::with_capacity(features.len());
    let mut beta = Matrix::zeros(k_count, dim);
    for t in 0..features.len() {
        let x = features.point(t);
        let g = gamma.row(t);
        let mut weighted = vec![0.0; dim];
        for k in 0..k_count {
            for e in 0..dim {
                let b = (x[e] - params.means[(k, e)]) / params.variances[(k, e)];
                beta[(k, e)] = b;
                weighted[e] += b * g[k];
            }
        }
        let mut d = Matrix::zeros(k_count, dim);
        for k in 0..k_count {
            for e in 0..dim {
                d[(k, e)] = g[k] * (weighted[e] - beta[(k, e)]);
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Per-point derivatives of every `γ_k` with respect to every `λ_s`, `μ_s`
/// and `σ²_s`, with the weights treated as free variables.
#[derive(Debug, Clone)]
pub struct PosteriorParamGrads {
    points: usize,
    components: usize,
    dim: usize,
    /// [t][k][s]
    d_lambda: Vec<f64>,
    /// [t][k][s][e]
    d_mu: Vec<f64>,
    /// [t][k][s][e]
    d_sigma2: Vec<f64>,
}

impl PosteriorParamGrads {
    pub fn points(&self) -> usize {
        self.points
    }

    #[inline]
    pub fn d_lambda(&self, t: usize, k: usize, s: usize) -> f64 {
        self.d_lambda[(t * self.components + k) * self.components + s]
    }

    #[inline]
    pub fn d_mu(&self, t: usize, k: usize, s: usize, e: usize) -> f64 {
        self.d_mu[((t * self.components + k) * self.components + s) * self.dim + e]
    }

    #[inline]
    pub fn d_sigma2(&self, t: usize, k: usize, s: usize, e: usize) -> f64 {
        self.d_sigma2[((t * self.components + k) * self.components + s) * self.dim + e]
    }
}

/// Implements
/// `∂γ_k/∂λ_s = γ_k (δ_ks/λ_k - γ_s/λ_s)`,
/// `∂γ_k/∂μ_s = γ_k (δ_ks - γ_s) (x - μ_s)/σ²_s`,
/// `∂γ_k/∂σ²_s = γ_k (δ_ks - γ_s) ((x - μ_s)²/(2σ⁴_s) - 1/(2σ²_s))`.
pub fn posterior_grad_params(
    features: &FeatureSet,
    params: &GmmParams,
    gamma: &PosteriorMatrix,
) -> Result<PosteriorParamGrads> {
    check_dims(features, params)?;
    gamma.check(features, params)?;
    let (t_count, k_count, dim) = (features.len(), params.components(), params.dim());
    let mut d_lambda = vec![0.0; t_count * k_count * k_count];
    let mut d_mu = vec![0.0; t_count * k_count * k_count * dim];
    let mut d_sigma2 = vec![0.0; t_count * k_count * k_count * dim];
    for t in 0..t_count {
        let x = features.point(t);
        let g = gamma.row(t);
        for k in 0..k_count {
            for s in 0..k_count {
                let delta = if k == s { 1.0 } else { 0.0 };
                let base = (t * k_count + k) * k_count + s;
                d_lambda[base] = g[k] * (delta / params.weights[k] - g[s] / params.weights[s]);
                let coupling = g[k] * (delta - g[s]);
                for e in 0..dim {
                    let diff = x[e] - params.means[(s, e)];
                    let var = params.variances[(s, e)];
                    d_mu[base * dim + e] = coupling * diff / var;
                    d_sigma2[base * dim + e] =
                        coupling * (diff * diff / (2.0 * var * var) - 1.0 / (2.0 * var));
                }
            }
        }
    }
    Ok(PosteriorParamGrads { points: t_count, components: k_count, dim, d_lambda, d_mu, d_sigma2 })
}
