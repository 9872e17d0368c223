//! Fisher-Vector encoding of a descriptor set under a diagonal GMM.
//!
//! For `T` points and `K` components of dimension `D`:
//!
//! ```text
//! F_λk  = 1/(T√λk)  Σ_t (γ_k(x_t) - λ_k)
//! F_μk  = 1/(T√λk)  Σ_t γ_k(x_t) (x_t - μ_k)/σ_k
//! F_σ²k = 1/(T√2λk) Σ_t γ_k(x_t) ((x_t - μ_k)²/σ²_k - 1)
//! ```
//!
//! laid out as `[F_λ1..F_λK | F_μ1..F_μK | F_σ²1..F_σ²K]`, `(2D+1)K` values.

mod backward;
pub mod jacobian;

pub use backward::{fv_backward, fv_backward_input, fv_backward_params};

use crate::data_io::FeatureSet;
use crate::error::{FvError, Result};
use crate::gmm::{check_dims, GmmParams, PosteriorMatrix};
use crate::matrix::Matrix;

/// Index arithmetic for the `[λ | μ | σ²]` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FvLayout {
    pub components: usize,
    pub dim: usize,
}

impl FvLayout {
    pub fn of(params: &GmmParams) -> Self {
        FvLayout { components: params.components(), dim: params.dim() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        (2 * self.dim + 1) * self.components
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn lambda(&self, k: usize) -> usize {
        k
    }

    #[inline]
    pub fn mu(&self, k: usize, d: usize) -> usize {
        self.components + k * self.dim + d
    }

    #[inline]
    pub fn sigma2(&self, k: usize, d: usize) -> usize {
        self.components * (1 + self.dim) + k * self.dim + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub layout: FvLayout,
    pub values: Vec<f64>,
}

impl FisherVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Per-component zeroth, first and second order posterior-weighted sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s0: Vec<f64>,
    /// K×D
    pub s1: Matrix,
    /// K×D
    pub s2: Matrix,
}

impl SufficientStats {
    /// Components whose total posterior mass is below `threshold`.
    pub fn starved(&self, threshold: f64) -> usize {
        self.s0.iter().filter(|&&m| m < threshold).count()
    }
}

/// Gradients of a scalar loss with respect to the mixture and the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FvGradients {
    pub d_lambda: Vec<f64>,
    /// K×D
    pub d_mu: Matrix,
    /// K×D
    pub d_sigma2: Matrix,
    /// T×D
    pub d_input: Matrix,
}

impl FvGradients {
    pub fn is_finite(&self) -> bool {
        self.d_lambda.iter().all(|v| v.is_finite())
            && self.d_mu.is_finite()
            && self.d_sigma2.is_finite()
            && self.d_input.is_finite()
    }
}

/// Shape and positivity checks. The weights are not required to sum to one so
/// that each `λ_k` can be treated as a free variable when differentiating.
pub(crate) fn check_inputs(features: &FeatureSet, params: &GmmParams) -> Result<()> {
    check_dims(features, params)?;
    let k = params.components();
    if k == 0 || params.means.rows() != k || !params.means.same_shape(&params.variances) {
        return Err(FvError::shape("inconsistent mixture parameter shapes"));
    }
    if params.weights.iter().any(|&w| !(w > 0.0)) {
        return Err(FvError::InvalidParameter("mixture weights must be positive".into()));
    }
    if params.variances.as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(FvError::InvalidParameter("variances must be positive".into()));
    }
    Ok(())
}

/// Forward pass through the sufficient statistics `S⁰, S¹, S²`.
pub fn fv_forward(
    features: &FeatureSet,
    params: &GmmParams,
) -> Result<(FisherVector, PosteriorMatrix, SufficientStats)> {
    check_inputs(features, params)?;
    let (t_count, k_count, dim) = (features.len(), params.components(), params.dim());
    let mut gamma = Matrix::zeros(t_count, k_count);
    let mut s0 = vec![0.0; k_count];
    let mut s1 = Matrix::zeros(k_count, dim);
    let mut s2 = Matrix::zeros(k_count, dim);
    for t in 0..t_count {
        let x = features.point(t);
        let g = gamma.row_mut(t);
        params.posterior_row(x, g);
        for k in 0..k_count {
            let w = g[k];
            s0[k] += w;
            let r1 = s1.row_mut(k);
            for d in 0..dim {
                r1[d] += w * x[d];
            }
            let r2 = s2.row_mut(k);
            for d in 0..dim {
                r2[d] += w * x[d] * x[d];
            }
        }
    }
    let stats = SufficientStats { s0, s1, s2 };
    let fv = fv_from_stats(&stats, params, t_count);
    Ok((fv, PosteriorMatrix(gamma), stats))
}

pub(crate) fn fv_from_stats(stats: &SufficientStats, params: &GmmParams, t_count: usize) -> FisherVector {
    let layout = FvLayout::of(params);
    let t = t_count as f64;
    let mut values = vec![0.0; layout.len()];
    for k in 0..layout.components {
        let lambda = params.weights[k];
        let s0 = stats.s0[k];
        let norm = 1.0 / (t * lambda.sqrt());
        let norm2 = 1.0 / (t * (2.0 * lambda).sqrt());
        values[layout.lambda(k)] = (s0 - t * lambda) * norm;
        for d in 0..layout.dim {
            let mu = params.means[(k, d)];
            let var = params.variances[(k, d)];
            let s1 = stats.s1[(k, d)];
            let s2 = stats.s2[(k, d)];
            values[layout.mu(k, d)] = (s1 - mu * s0) * norm / var.sqrt();
            values[layout.sigma2(k, d)] = (s2 - 2.0 * mu * s1 + mu * mu * s0 - var * s0) * norm2 / var;
        }
    }
    FisherVector { layout, values }
}

/// Literal per-point summation, without sufficient statistics.
pub fn fv_forward_naive(features: &FeatureSet, params: &GmmParams) -> Result<FisherVector> {
    check_inputs(features, params)?;
    let layout = FvLayout::of(params);
    let t = features.len() as f64;
    let mut values = vec![0.0; layout.len()];
    let mut gamma = vec![0.0; layout.components];
    for x in features.points() {
        params.posterior_row(x, &mut gamma);
        for k in 0..layout.components {
            let lambda = params.weights[k];
            values[layout.lambda(k)] += (gamma[k] - lambda) / (t * lambda.sqrt());
            for d in 0..layout.dim {
                let sigma = params.variances[(k, d)].sqrt();
                let alpha = (x[d] - params.means[(k, d)]) / sigma;
                values[layout.mu(k, d)] += gamma[k] * alpha / (t * lambda.sqrt());
                values[layout.sigma2(k, d)] +=
                    gamma[k] * (alpha * alpha - 1.0) / 2f64.sqrt() / (t * lambda.sqrt());
            }
        }
    }
    Ok(FisherVector { layout, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    pub(crate) fn random_case(k: usize, d: usize, t: usize, seed: u64) -> (FeatureSet, GmmParams) {
        let mut r = rng::seeded(seed, 0);
        let mut w: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let means = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let vars = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(0.5..2.0)).collect()).unwrap();
        let x = FeatureSet::new(t, d, (0..t * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        (x, GmmParams { weights: w, means, variances: vars })
    }

    fn rel_dev(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn point_at_mean_single_component() {
        let p = GmmParams::new(vec![1.0], Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap(), Matrix::filled(1, 3, 0.3)).unwrap();
        let x = FeatureSet::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let (fv, _, _) = fv_forward(&x, &p).unwrap();
        let want = [0.0, 0.0, 0.0, 0.0, -1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        for (a, b) in fv.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", fv.values);
        }
        assert_eq!(fv_forward_naive(&x, &p).unwrap().values, fv.values);
    }

    #[test]
    fn length_for_64_dims_32_components() {
        let (x, p) = random_case(32, 64, 3, 1);
        assert_eq!(fv_forward(&x, &p).unwrap().0.len(), 4128);
    }

    #[test]
    fn stats_match_naive_summation() {
        for seed in 0..10 {
            let (x, p) = random_case(3, 4, 50, seed);
            let (fv, _, stats) = fv_forward(&x, &p).unwrap();
            let naive = fv_forward_naive(&x, &p).unwrap();
            assert!(rel_dev(&fv.values, &naive.values) <= 1e-10);
            assert!((stats.s0.iter().sum::<f64>() - 50.0).abs() < 1e-9 * 50.0);
        }
    }

    #[test]
    fn duplicated_points_leave_fv_unchanged() {
        let (x, p) = random_case(2, 2, 1, 3);
        let many = FeatureSet::from_rows(&vec![x.point(0).to_vec(); 7]).unwrap();
        let a = fv_forward_naive(&x, &p).unwrap();
        let b = fv_forward_naive(&many, &p).unwrap();
        assert!(rel_dev(&a.values, &b.values) < 1e-14);
    }

    #[test]
    fn permutation_invariant() {
        let (x, p) = random_case(3, 2, 9, 4);
        let mut rows: Vec<Vec<f64>> = x.points().map(<[f64]>::to_vec).collect();
        rows.reverse();
        rows.swap(0, 4);
        let y = FeatureSet::from_rows(&rows).unwrap();
        let a = fv_forward(&x, &p).unwrap().0;
        let b = fv_forward(&y, &p).unwrap().0;
        assert!(rel_dev(&a.values, &b.values) < 1e-13);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (_, p) = random_case(2, 3, 1, 5);
        let x = FeatureSet::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(fv_forward(&x, &p), Err(FvError::Shape(_))));
    }
}
