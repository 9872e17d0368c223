//! Explicit Jacobian of the Fisher Vector, entry by entry.
//!
//! This is a debugging path for small problems: it evaluates each derivative
//! block in closed form from the posteriors and their gradients and stores the
//! full matrices. The training path uses [`super::fv_backward`] instead.
//!
//! Every entry carries the `1/T` of the forward pass.

use super::{check_inputs, FvLayout};
use crate::data_io::FeatureSet;
use crate::error::{FvError, Result};
use crate::gmm::{posterior_grad_input, posteriors, GmmParams};
use crate::matrix::Matrix;

/// Largest K, D or T accepted by [`full_jacobian`].
pub const MAX_DEBUG_SIZE: usize = 8;

/// Column order for parameters: `[λ (K) | μ (K·D) | σ² (K·D)]`, the same
/// layout as the Fisher Vector itself. Input columns are `t·D + e`.
#[derive(Debug, Clone)]
pub struct FvJacobian {
    pub layout: FvLayout,
    /// FV length × (2D+1)K
    pub d_params: Matrix,
    /// FV length × T·D
    pub d_input: Matrix,
}

impl FvJacobian {
    /// `Jᵀ u` over the parameter columns.
    pub fn vjp_params(&self, upstream: &[f64]) -> Vec<f64> {
        vjp(&self.d_params, upstream)
    }

    /// `Jᵀ u` over the input columns, flattened T·D.
    pub fn vjp_input(&self, upstream: &[f64]) -> Vec<f64> {
        vjp(&self.d_input, upstream)
    }
}

fn vjp(m: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &w) in u.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += w * v;
        }
    }
    out
}

pub fn full_jacobian(features: &FeatureSet, params: &GmmParams) -> Result<FvJacobian> {
    check_inputs(features, params)?;
    let layout = FvLayout::of(params);
    let (kc, dim, tc) = (layout.components, layout.dim, features.len());
    if kc > MAX_DEBUG_SIZE || dim > MAX_DEBUG_SIZE || tc > MAX_DEBUG_SIZE {
        return Err(FvError::Unsupported(format!(
            "explicit Jacobian limited to K, D, T <= {MAX_DEBUG_SIZE} (got K={kc}, D={dim}, T={tc})"
        )));
    }
    let gamma = posteriors(features, params)?;
    let dgamma_dx = posterior_grad_input(features, params, &gamma)?;
    let t_norm = 1.0 / tc as f64;
    let lam = &params.weights;
    let sigma = |k: usize, d: usize| params.variances[(k, d)].sqrt();
    let var = |k: usize, d: usize| params.variances[(k, d)];
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };

    let mut jp = Matrix::zeros(layout.len(), layout.len());
    let mut jx = Matrix::zeros(layout.len(), tc * dim);
    for t in 0..tc {
        let x = features.point(t);
        let g = gamma.row(t);
        let alpha = |k: usize, d: usize| (x[d] - params.means[(k, d)]) / sigma(k, d);

        for k in 0..kc {
            let sq = lam[k].sqrt();
            let sq2 = (2.0 * lam[k]).sqrt();
            for s in 0..kc {
                let col = layout.lambda(s);
                // ∂F_λk/∂λs
                jp[(layout.lambda(k), col)] +=
                    t_norm * (delta(s, k) * (g[k] - lam[k]) - 2.0 * g[s] * g[k]) / (2.0 * lam[s] * sq);
                for d in 0..dim {
                    let a = alpha(k, d);
                    // ∂F_μk/∂λs
                    jp[(layout.mu(k, d), col)] += t_norm * g[k] * a * (delta(s, k) - 2.0 * g[s]) / (2.0 * lam[s] * sq);
                    // ∂F_σ²k/∂λs
                    jp[(layout.sigma2(k, d), col)] +=
                        t_norm * g[k] * (a * a - 1.0) * (delta(k, s) - 2.0 * g[s]) / (2.0 * lam[s] * sq2);
                }
                for e in 0..dim {
                    let a_se = alpha(s, e);
                    let coupling = delta(k, s) - g[s];
                    let (mu_col, var_col) = (layout.mu(s, e), layout.sigma2(s, e));
                    // ∂F_λk/∂[μs]e and ∂F_λk/∂[σ²s]e
                    jp[(layout.lambda(k), mu_col)] += t_norm * g[k] * coupling * a_se / (sigma(s, e) * sq);
                    jp[(layout.lambda(k), var_col)] +=
                        t_norm * g[k] * coupling * (a_se * a_se - 1.0) / (2.0 * var(s, e) * sq);
                    for d in 0..dim {
                        let a_kd = alpha(k, d);
                        let dd = delta(s, k) * delta(e, d);
                        // ∂[F_μk]d/∂[μs]e
                        jp[(layout.mu(k, d), mu_col)] +=
                            t_norm * g[k] * (coupling * a_se * a_kd - dd) / (sigma(s, e) * sq);
                        // ∂[F_σ²k]d/∂[μs]e
                        jp[(layout.sigma2(k, d), mu_col)] +=
                            t_norm * g[k] * (a_se * (coupling * (a_kd * a_kd - 1.0) - 2.0 * dd)) / (sigma(s, e) * sq2);
                        // ∂[F_μk]d/∂[σ²s]e
                        jp[(layout.mu(k, d), var_col)] +=
                            t_norm * g[k] * a_kd * (coupling * (a_se * a_se - 1.0) - dd) / (2.0 * var(s, e) * sq);
                        // ∂[F_σ²k]d/∂[σ²s]e
                        jp[(layout.sigma2(k, d), var_col)] += t_norm
                            * g[k]
                            * (coupling * (a_se * a_se - 1.0) * (a_kd * a_kd - 1.0) - 2.0 * dd * a_kd * a_kd)
                            / (2.0 * var(s, e) * sq2);
                    }
                }
            }

            for e in 0..dim {
                let col = t * dim + e;
                let dg = dgamma_dx[t][(k, e)];
                jx[(layout.lambda(k), col)] += t_norm * dg / sq;
                for d in 0..dim {
                    let a = alpha(k, d);
                    let beta = (x[d] - params.means[(k, d)]) / var(k, d);
                    jx[(layout.mu(k, d), col)] += t_norm * (dg * a + delta(e, d) * g[k] / sigma(k, d)) / sq;
                    jx[(layout.sigma2(k, d), col)] +=
                        t_norm * (dg * (a * a - 1.0) + 2.0 * delta(e, d) * g[k] * beta) / sq2;
                }
            }
        }
    }
    Ok(FvJacobian { layout, d_params: jp, d_input: jx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{fv_backward, fv_forward, tests::random_case};

    #[test]
    fn fused_backward_equals_explicit_contraction() {
        for seed in 0..5 {
            let (x, p) = random_case(3, 3, 6, seed);
            let (fv, gamma, _) = fv_forward(&x, &p).unwrap();
            let u: Vec<f64> = (0..fv.len()).map(|i| ((i + 1) as f64 * 0.731 + seed as f64).sin()).collect();
            let j = full_jacobian(&x, &p).unwrap();
            let fused = fv_backward(&x, &p, &gamma, &u).unwrap();
            let want_p = j.vjp_params(&u);
            let got_p: Vec<f64> = fused
                .d_lambda
                .iter()
                .chain(fused.d_mu.as_slice())
                .chain(fused.d_sigma2.as_slice())
                .copied()
                .collect();
            for (a, b) in got_p.iter().zip(&want_p) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
            for (a, b) in fused.d_input.as_slice().iter().zip(&j.vjp_input(&u)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_large_problems() {
        let (x, p) = random_case(9, 2, 2, 0);
        assert!(matches!(full_jacobian(&x, &p), Err(FvError::Unsupported(_))));
    }
}
