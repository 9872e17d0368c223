//! Diagonal-covariance Gaussian mixtures.
//!
//! Weights and variances are constrained (`λ` on the simplex, `σ² > 0`). SGD
//! works on [`RawGmmParams`] instead, where any real `(ν, ζ)` materializes into
//! a valid mixture through a normalized sigmoid and a shifted exponential.

mod em;
mod grad;
mod kmeans;

pub use em::{em_fit, EmOptions, EmReport};
pub use grad::{posterior_grad_input, posterior_grad_params, PosteriorParamGrads};
pub use kmeans::{kmeans_init, KmeansOptions};

use std::f64::consts::PI;

use crate::data_io::FeatureSet;
use crate::error::{FvError, Result};
use crate::matrix::Matrix;

/// Variance floor `ε` used by the reparameterization and by fitting.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// `ν` is clamped to this range before the sigmoid.
pub const NU_CLAMP: f64 = 30.0;

/// Constrained mixture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    /// K×D
    pub means: Matrix,
    /// K×D, diagonal covariances.
    pub variances: Matrix,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let p = GmmParams { weights, means, variances };
        p.validate()?;
        Ok(p)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Length of the Fisher Vector this mixture produces: `(2D + 1) K`.
    pub fn fv_len(&self) -> usize {
        (2 * self.dim() + 1) * self.components()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(FvError::InvalidParameter("mixture has no components".into()));
        }
        if self.means.rows() != k || !self.means.same_shape(&self.variances) {
            return Err(FvError::shape(format!(
                "weights {k}, means {}x{}, variances {}x{}",
                self.means.rows(),
                self.means.cols(),
                self.variances.rows(),
                self.variances.cols()
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(FvError::InvalidParameter("weights must lie in (0, 1]".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FvError::InvalidParameter(format!("weights sum to {total}")));
        }
        if self.variances.as_slice().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(FvError::InvalidParameter("variances must be positive and finite".into()));
        }
        if !self.means.is_finite() {
            return Err(FvError::InvalidParameter("means must be finite".into()));
        }
        Ok(())
    }

    /// Converts to the unconstrained parameterization.
    ///
    /// `ν_j = logit(λ_j / 2)` so that the normalized sigmoids reproduce `λ`,
    /// and `ζ = ln(σ² - ε)` with `σ²` floored at `ε + 1e-12`.
    pub fn to_raw(&self, epsilon: f64) -> Result<RawGmmParams> {
        self.validate()?;
        let nu = self
            .weights
            .iter()
            .map(|&w| {
                let p = 0.5 * w;
                (p / (1.0 - p)).ln().clamp(-NU_CLAMP, NU_CLAMP)
            })
            .collect();
        let mut zeta = self.variances.clone();
        zeta.as_mut_slice().iter_mut().for_each(|v| *v = (v.max(epsilon + 1e-12) - epsilon).ln());
        RawGmmParams::new(nu, zeta, self.means.clone(), epsilon)
    }

    /// Per-point log-likelihood `ln Σ_k λ_k N(x; μ_k, σ²_k)`, writing the
    /// posteriors into `gamma` (length K).
    pub(crate) fn posterior_row(&self, x: &[f64], gamma: &mut [f64]) -> f64 {
        for (k, g) in gamma.iter_mut().enumerate() {
            *g = self.weights[k].ln() + log_gaussian_unchecked(x, self.means.row(k), self.variances.row(k));
        }
        let max = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for g in gamma.iter_mut() {
            *g = (*g - max).exp();
            total += *g;
        }
        for g in gamma.iter_mut() {
            *g /= total;
        }
        max + total.ln()
    }

    /// Mean per-point log-likelihood of `points`.
    pub fn mean_log_likelihood(&self, points: &Matrix) -> f64 {
        let mut gamma = vec![0.0; self.components()];
        let total: f64 = points.iter_rows().map(|x| self.posterior_row(x, &mut gamma)).sum();
        total / points.rows() as f64
    }
}

/// `ln Σ exp(a_i)` with max subtraction.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Unconstrained mixture parameters driven by SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGmmParams {
    pub nu: Vec<f64>,
    /// K×D
    pub zeta: Matrix,
    /// K×D
    pub means: Matrix,
    pub epsilon: f64,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl RawGmmParams {
    pub fn new(nu: Vec<f64>, zeta: Matrix, means: Matrix, epsilon: f64) -> Result<Self> {
        if nu.is_empty() {
            return Err(FvError::InvalidParameter("mixture has no components".into()));
        }
        if zeta.rows() != nu.len() || !zeta.same_shape(&means) {
            return Err(FvError::shape("nu, zeta and means disagree on shape"));
        }
        if !(epsilon > 0.0) {
            return Err(FvError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(RawGmmParams { nu, zeta, means, epsilon })
    }

    pub fn components(&self) -> usize {
        self.nu.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Materializes the constrained mixture:
    /// `λ_j = s(ν_j) / Σ_ℓ s(ν_ℓ)`, `σ² = ε + exp(ζ)`, means copied.
    pub fn materialize(&self) -> GmmParams {
        let s: Vec<f64> = self.nu.iter().map(|&v| sigmoid(v.clamp(-NU_CLAMP, NU_CLAMP))).collect();
        let total: f64 = s.iter().sum();
        let weights = s.iter().map(|v| v / total).collect();
        let mut variances = self.zeta.clone();
        variances.as_mut_slice().iter_mut().for_each(|z| *z = self.epsilon + z.exp());
        GmmParams { weights, means: self.means.clone(), variances }
    }

    /// Chain rule through [`RawGmmParams::materialize`]: maps gradients with
    /// respect to `λ` and `σ²` onto gradients with respect to `ν` and `ζ`.
    pub fn backward(&self, d_lambda: &[f64], d_sigma2: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if d_lambda.len() != self.components() || !d_sigma2.same_shape(&self.zeta) {
            return Err(FvError::shape("gradient shapes do not match the raw parameters"));
        }
        let clamped: Vec<f64> = self.nu.iter().map(|&v| v.clamp(-NU_CLAMP, NU_CLAMP)).collect();
        let s: Vec<f64> = clamped.iter().map(|&v| sigmoid(v)).collect();
        let total: f64 = s.iter().sum();
        let lambda: Vec<f64> = s.iter().map(|v| v / total).collect();
        let mean_grad: f64 = d_lambda.iter().zip(&lambda).map(|(g, l)| g * l).sum();
        let d_nu = (0..self.components())
            .map(|j| {
                if self.nu[j].abs() > NU_CLAMP {
                    return 0.0;
                }
                let ds = s[j] * (1.0 - s[j]);
                ds / total * (d_lambda[j] - mean_grad)
            })
            .collect();
        let mut d_zeta = d_sigma2.clone();
        for (g, z) in d_zeta.as_mut_slice().iter_mut().zip(self.zeta.as_slice()) {
            *g *= z.exp();
        }
        Ok((d_nu, d_zeta))
    }
}

/// `ln N(x; μ, diag(σ²))`.
pub fn log_gaussian(x: &[f64], mean: &[f64], variance: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != variance.len() {
        return Err(FvError::shape("x, mean and variance must share a dimension"));
    }
    if let Some(v) = variance.iter().find(|&&v| !(v > 0.0)) {
        return Err(FvError::InvalidParameter(format!("variance coordinate {v} is not positive")));
    }
    Ok(log_gaussian_unchecked(x, mean, variance))
}

#[inline]
pub(crate) fn log_gaussian_unchecked(x: &[f64], mean: &[f64], variance: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..x.len() {
        let diff = x[d] - mean[d];
        acc += (2.0 * PI * variance[d]).ln() + diff * diff / variance[d];
    }
    -0.5 * acc
}

/// Soft assignments `γ_k(x_t)`: a T×K row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(pub Matrix);

impl PosteriorMatrix {
    pub fn points(&self) -> usize {
        self.0.rows()
    }

    pub fn components(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub(crate) fn check(&self, features: &FeatureSet, params: &GmmParams) -> Result<()> {
        if self.points() != features.len() || self.components() != params.components() {
            return Err(FvError::shape(format!(
                "posterior matrix is {}x{}, expected {}x{}",
                self.points(),
                self.components(),
                features.len(),
                params.components()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_dims(features: &FeatureSet, params: &GmmParams) -> Result<()> {
    if features.dim() != params.dim() {
        return Err(FvError::shape(format!(
            "features have dimension {}, mixture has {}",
            features.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Posteriors computed in the log domain with a max-subtracted log-sum-exp.
pub fn posteriors(features: &FeatureSet, params: &GmmParams) -> Result<PosteriorMatrix> {
    check_dims(features, params)?;
    let mut gamma = Matrix::zeros(features.len(), params.components());
    for t in 0..features.len() {
        params.posterior_row(features.point(t), gamma.row_mut(t));
    }
    Ok(PosteriorMatrix(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

    #[test]
    fn standard_normal_at_mode() {
        let v = log_gaussian(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!((v + HALF_LN_2PI).abs() < 1e-15);
        let v = log_gaussian(&[1.0], &[0.0], &[1.0]).unwrap();
        assert!((v + HALF_LN_2PI + 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_dimensional_density_matches_reference() {
        // Closed form evaluated with mpmath at 50 digits:
        // -0.5*(ln(2π·0.5) + 0.04/0.5 + ln(2π·2) + 2.56/2)
        let v = log_gaussian(&[0.3, -1.2], &[0.1, 0.4], &[0.5, 2.0]).unwrap();
        let reference = -2.517_877_066_409_345_5;
        assert!((v - reference).abs() < 1e-14, "{v}");
    }

    #[test]
    fn nonpositive_variance_rejected() {
        assert!(matches!(log_gaussian(&[0.0], &[0.0], &[0.0]), Err(FvError::InvalidParameter(_))));
    }

    fn params(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> GmmParams {
        GmmParams::new(weights, Matrix::from_rows(&means).unwrap(), Matrix::from_rows(&vars).unwrap()).unwrap()
    }

    #[test]
    fn single_component_posterior_is_one() {
        let p = params(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0, 2.0]]);
        let f = FeatureSet::from_rows(&[vec![3.0, -4.0], vec![100.0, 0.0]]).unwrap();
        let g = posteriors(&f, &p).unwrap();
        assert!(g.0.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_components_split_evenly() {
        let p = params(vec![0.5, 0.5], vec![vec![1.0], vec![1.0]], vec![vec![2.0], vec![2.0]]);
        let f = FeatureSet::from_rows(&[vec![-3.0], vec![7.0]]).unwrap();
        let g = posteriors(&f, &p).unwrap();
        assert!(g.0.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = params(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]);
        let f = FeatureSet::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(posteriors(&f, &p), Err(FvError::Shape(_))));
    }

    #[test]
    fn posteriors_stable_at_extreme_scales() {
        let mut r = rng::seeded(11, 0);
        for scale in [1e3, 1e-3] {
            let k = 4;
            let means: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let p = params(vec![0.1, 0.2, 0.3, 0.4], means, vec![vec![1.0; 3]; k]);
            let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| scale * r.random_range(-1.0..1.0)).collect()).collect();
            let g = posteriors(&FeatureSet::from_rows(&rows).unwrap(), &p).unwrap();
            for t in 0..20 {
                let row = g.row(t);
                assert!(row.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_nu_gives_uniform_weights() {
        let raw = RawGmmParams::new(vec![0.7; 5], Matrix::zeros(5, 2), Matrix::zeros(5, 2), DEFAULT_EPSILON).unwrap();
        let p = raw.materialize();
        assert!(p.weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert!(p.variances.as_slice().iter().all(|&v| v == DEFAULT_EPSILON + 1.0));
    }

    #[test]
    fn uniform_weight_gradient_vanishes() {
        let raw = RawGmmParams::new(vec![0.3, -1.0, 2.0], Matrix::zeros(3, 2), Matrix::zeros(3, 2), DEFAULT_EPSILON).unwrap();
        let (d_nu, d_zeta) = raw.backward(&[2.5; 3], &Matrix::zeros(3, 2)).unwrap();
        assert!(d_nu.iter().all(|v| v.abs() < 1e-15));
        assert!(d_zeta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamped_nu_has_zero_gradient() {
        let raw = RawGmmParams::new(vec![40.0, 0.0], Matrix::zeros(2, 1), Matrix::zeros(2, 1), DEFAULT_EPSILON).unwrap();
        let (d_nu, _) = raw.backward(&[1.0, -1.0], &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(d_nu[0], 0.0);
    }

    #[test]
    fn reparam_backward_matches_finite_differences() {
        let mut r = rng::seeded(5, 0);
        let (k, d) = (3, 2);
        let nu: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let zeta = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let raw = RawGmmParams::new(nu, zeta, Matrix::zeros(k, d), DEFAULT_EPSILON).unwrap();
        let w_l: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        let w_s = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let loss = |raw: &RawGmmParams| {
            let p = raw.materialize();
            p.weights.iter().zip(&w_l).map(|(a, b)| a * b).sum::<f64>()
                + p.variances.as_slice().iter().zip(w_s.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (d_nu, d_zeta) = raw.backward(&w_l, &w_s).unwrap();
        let h = 1e-5;
        for j in 0..k {
            let (mut a, mut b) = (raw.clone(), raw.clone());
            a.nu[j] += h;
            b.nu[j] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - d_nu[j]).abs() <= 1e-6 * fd.abs().max(d_nu[j].abs()).max(1e-3), "{fd} {}", d_nu[j]);
        }
        for i in 0..k * d {
            let (mut a, mut b) = (raw.clone(), raw.clone());
            a.zeta.as_mut_slice()[i] += h;
            b.zeta.as_mut_slice()[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let an = d_zeta.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3));
        }
    }

    #[test]
    fn constrained_to_raw_round_trip() {
        let p = params(vec![0.1, 0.6, 0.3], vec![vec![0.0]; 3], vec![vec![0.5], vec![1e-5], vec![2.0]]);
        let back = p.to_raw(DEFAULT_EPSILON).unwrap().materialize();
        for (a, b) in back.weights.iter().zip(&p.weights) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((back.variances[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(back.variances[(1, 0)] > DEFAULT_EPSILON);
        assert!((back.variances[(2, 0)] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn any_raw_params_materialize_validly(
            nu in proptest::collection::vec(-50.0f64..50.0, 1..6),
            z in proptest::collection::vec(-30.0f64..5.0, 12),
        ) {
            let k = nu.len();
            let zeta = Matrix::from_vec(k, 2, (0..2 * k).map(|i| z[i % z.len()]).collect()).unwrap();
            let raw = RawGmmParams::new(nu, zeta, Matrix::zeros(k, 2), DEFAULT_EPSILON).unwrap();
            let p = raw.materialize();
            prop_assert!(p.validate().is_ok());
            prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-15 * k as f64);
            prop_assert!(p.variances.as_slice().iter().all(|&v| v > DEFAULT_EPSILON));
        }
    }
}
