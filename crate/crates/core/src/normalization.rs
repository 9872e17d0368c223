//! Signed power normalization followed by L2 normalization,
//! `φ(x) = sign(x)|x|^α / ‖sign(x)|x|^α‖₂`.

use crate::error::{FvError, Result};
use crate::matrix::l2_norm;

/// Coordinates with smaller magnitude are treated as exactly zero by the
/// backward pass.
pub const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub alpha: f64,
}

impl NormConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(FvError::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(NormConfig { alpha })
    }
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { alpha: 0.5 }
    }
}

fn power(v: &[f64], alpha: f64) -> Vec<f64> {
    v.iter().map(|&x| x.signum() * x.abs().powf(alpha) * f64::from(x != 0.0)).collect()
}

/// Returns the zero vector for a zero input.
pub fn norm_forward(v: &[f64], cfg: NormConfig) -> Vec<f64> {
    let mut p = power(v, cfg.alpha);
    let n = l2_norm(&p);
    if n > 0.0 {
        p.iter_mut().for_each(|x| *x /= n);
    }
    p
}

/// `Jᵀ u` for the exact Jacobian at `α = 0.5`:
/// `J = (1/‖x̂‖)(I - φφᵀ) diag(1/(2|x̂_i|))`, with zero rows and columns where
/// `x_i` is (numerically) zero.
pub fn norm_backward(v: &[f64], upstream: &[f64], cfg: NormConfig) -> Result<Vec<f64>> {
    if cfg.alpha != 0.5 {
        return Err(FvError::Unsupported(format!(
            "normalization backward is only defined for alpha = 0.5, got {}",
            cfg.alpha
        )));
    }
    if v.len() != upstream.len() {
        return Err(FvError::shape(format!("input has length {}, upstream {}", v.len(), upstream.len())));
    }
    let hat: Vec<f64> = v
        .iter()
        .map(|&x| if x.abs() < ZERO_THRESHOLD { 0.0 } else { x.signum() * x.abs().sqrt() })
        .collect();
    let n = l2_norm(&hat);
    if n == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let phi: Vec<f64> = hat.iter().map(|h| h / n).collect();
    let proj: f64 = phi.iter().zip(upstream).map(|(p, u)| p * u).sum();
    Ok(hat
        .iter()
        .zip(&phi)
        .zip(upstream)
        .map(|((&h, &p), &u)| if h == 0.0 { 0.0 } else { (u - p * proj) / (n * 2.0 * h.abs()) })
        .collect())
}
