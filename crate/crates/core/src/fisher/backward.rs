//! Fused vector-Jacobian products of the Fisher Vector.
//!
//! For an upstream gradient `u = ∂L/∂F` each point contributes through its
//! posteriors and through the explicit dependence of the μ/σ² blocks on the
//! parameters. Writing
//!
//! ```text
//! g_k = c_k u_λk + c_k Σ_d u_μkd α_kd + c'_k Σ_d u_σkd (α²_kd - 1)
//! h_k = γ_k (g_k - Σ_j γ_j g_j)
//! ```
//!
//! with `c_k = 1/(T√λk)`, `c'_k = 1/(T√2λk)`, all nine parameter blocks and
//! the three input blocks of the Jacobian contract to O(KD) work per point.
//! Points are visited in ascending order.

use super::{check_inputs, FvGradients, FvLayout};
use crate::data_io::FeatureSet;
use crate::error::{FvError, Result};
use crate::gmm::{GmmParams, PosteriorMatrix};
use crate::matrix::Matrix;

#[derive(Clone, Copy, PartialEq, Eq)]
struct Want {
    params: bool,
    input: bool,
}

fn check_upstream(features: &FeatureSet, params: &GmmParams, gamma: &PosteriorMatrix, upstream: &[f64]) -> Result<FvLayout> {
    check_inputs(features, params)?;
    gamma.check(features, params)?;
    let layout = FvLayout::of(params);
    if upstream.len() != layout.len() {
        return Err(FvError::shape(format!(
            "upstream gradient has length {}, Fisher Vector has {}",
            upstream.len(),
            layout.len()
        )));
    }
    Ok(layout)
}

fn run(
    features: &FeatureSet,
    params: &GmmParams,
    gamma: &PosteriorMatrix,
    upstream: &[f64],
    want: Want,
) -> Result<FvGradients> {
    let layout = check_upstream(features, params, gamma, upstream)?;
    let (k_count, dim) = (layout.components, layout.dim);
    let t_count = features.len();
    let t = t_count as f64;

    let c: Vec<f64> = params.weights.iter().map(|l| 1.0 / (t * l.sqrt())).collect();
    let c2: Vec<f64> = params.weights.iter().map(|l| 1.0 / (t * (2.0 * l).sqrt())).collect();
    let sigma: Vec<f64> = params.variances.as_slice().iter().map(|v| v.sqrt()).collect();

    let mut d_lambda = vec![0.0; k_count];
    let mut d_mu = Matrix::zeros(k_count, dim);
    let mut d_sigma2 = Matrix::zeros(k_count, dim);
    let mut d_input = Matrix::zeros(if want.input { t_count } else { 0 }, dim);

    let mut alpha = Matrix::zeros(k_count, dim);
    let mut g = vec![0.0; k_count];
    for ti in 0..t_count {
        let x = features.point(ti);
        let gam = gamma.row(ti);
        let mut g_bar = 0.0;
        for k in 0..k_count {
            let mut acc = c[k] * upstream[layout.lambda(k)];
            for d in 0..dim {
                let a = (x[d] - params.means[(k, d)]) / sigma[k * dim + d];
                alpha[(k, d)] = a;
                acc += c[k] * upstream[layout.mu(k, d)] * a + c2[k] * upstream[layout.sigma2(k, d)] * (a * a - 1.0);
            }
            g[k] = acc;
            g_bar += gam[k] * acc;
        }

        for k in 0..k_count {
            let h = gam[k] * (g[k] - g_bar);
            if want.params {
                let lambda = params.weights[k];
                d_lambda[k] += h / lambda - gam[k] * g[k] / (2.0 * lambda) - 0.5 * c[k] * upstream[layout.lambda(k)];
            }
            for d in 0..dim {
                let a = alpha[(k, d)];
                let s = sigma[k * dim + d];
                let var = params.variances[(k, d)];
                let u_mu = upstream[layout.mu(k, d)];
                let u_s2 = upstream[layout.sigma2(k, d)];
                if want.params {
                    d_mu[(k, d)] += h * a / s - gam[k] * (c[k] * u_mu + 2.0 * c2[k] * u_s2 * a) / s;
                    d_sigma2[(k, d)] += h * (a * a - 1.0) / (2.0 * var)
                        - gam[k] * (c[k] * u_mu * a / (2.0 * var) + c2[k] * u_s2 * a * a / var);
                }
                if want.input {
                    d_input[(ti, d)] += -h * a / s + gam[k] * (c[k] * u_mu + 2.0 * c2[k] * u_s2 * a) / s;
                }
            }
        }
    }
    Ok(FvGradients { d_lambda, d_mu, d_sigma2, d_input })
}

/// `uᵀ ∂F/∂(λ, μ, σ²)`.
pub fn fv_backward_params(
    features: &FeatureSet,
    params: &GmmParams,
    gamma: &PosteriorMatrix,
    upstream: &[f64],
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let g = run(features, params, gamma, upstream, Want { params: true, input: false })?;
    Ok((g.d_lambda, g.d_mu, g.d_sigma2))
}

/// `uᵀ ∂F/∂x_t` for every point (T×D).
pub fn fv_backward_input(
    features: &FeatureSet,
    params: &GmmParams,
    gamma: &PosteriorMatrix,
    upstream: &[f64],
) -> Result<Matrix> {
    Ok(run(features, params, gamma, upstream, Want { params: false, input: true })?.d_input)
}

/// Both products in one sweep over the points.
pub fn fv_backward(
    features: &FeatureSet,
    params: &GmmParams,
    gamma: &PosteriorMatrix,
    upstream: &[f64],
) -> Result<FvGradients> {
    run(features, params, gamma, upstream, Want { params: true, input: true })
}
