//! Trainable descriptor transform `x = tanh(W x̃ + b)` with square `W`.

use nalgebra::{DMatrix, DVector, LU};
use rand::Rng;

use crate::data_io::FeatureSet;
use crate::error::{FvError, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Inputs to `atanh` are clamped to `±(1 - ATANH_MARGIN)`.
pub const ATANH_MARGIN: f64 = 1e-6;

/// Xavier draws with a worse condition number are rejected.
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayerParams {
    /// D×D
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl FeatureLayerParams {
    pub fn identity(dim: usize) -> Self {
        FeatureLayerParams { weight: Matrix::identity(dim), bias: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.weight.to_nalgebra().singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    fn check(&self, features: &FeatureSet) -> Result<()> {
        let d = self.dim();
        if self.weight.rows() != d || self.weight.cols() != d {
            return Err(FvError::shape(format!(
                "weight is {}x{}, bias has length {d}",
                self.weight.rows(),
                self.weight.cols()
            )));
        }
        if features.dim() != d {
            return Err(FvError::shape(format!("features have dimension {}, layer has {d}", features.dim())));
        }
        Ok(())
    }

    #[inline]
    fn pre_activation(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.bias[r] + self.weight.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Uniform Xavier initialization on `[-√(6/2D), √(6/2D)]` with zero bias,
/// re-drawn from the next substream while the condition number exceeds
/// [`MAX_CONDITION`].
pub fn xavier_init(dim: usize, seed: u64) -> Result<FeatureLayerParams> {
    if dim == 0 {
        return Err(FvError::InvalidParameter("dimension must be positive".into()));
    }
    let bound = (6.0 / (2 * dim) as f64).sqrt();
    for attempt in 0..64u64 {
        let mut r = rng::seeded(seed, rng::stream::XAVIER + (attempt << 8));
        let values = (0..dim * dim).map(|_| r.random_range(-bound..=bound)).collect();
        let params = FeatureLayerParams { weight: Matrix::from_vec(dim, dim, values)?, bias: vec![0.0; dim] };
        if params.condition_number() <= MAX_CONDITION {
            return Ok(params);
        }
    }
    Err(FvError::Initialization("no well-conditioned Xavier draw after 64 attempts".into()))
}

/// A factorized `W` that maps target activations back to layer inputs.
#[derive(Debug, Clone)]
pub struct Inversion {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    bias: Vec<f64>,
}

impl Inversion {
    pub fn new(params: &FeatureLayerParams) -> Result<Self> {
        let w: DMatrix<f64> = params.weight.to_nalgebra();
        if params.condition_number() > 1e14 {
            return Err(FvError::Inversion("weight matrix is singular".into()));
        }
        Ok(Inversion { lu: w.lu(), bias: params.bias.clone() })
    }

    /// `x̃ = W⁻¹(atanh(clamp(x)) - b)` row by row.
    pub fn apply(&self, x: &FeatureSet) -> Result<FeatureSet> {
        let d = self.bias.len();
        if x.dim() != d {
            return Err(FvError::shape(format!("features have dimension {}, layer has {d}", x.dim())));
        }
        let limit = 1.0 - ATANH_MARGIN;
        let mut out = Matrix::zeros(x.len(), d);
        for t in 0..x.len() {
            let rhs = DVector::from_iterator(
                d,
                x.point(t).iter().zip(&self.bias).map(|(v, b)| v.clamp(-limit, limit).atanh() - b),
            );
            let sol = self
                .lu
                .solve(&rhs)
                .ok_or_else(|| FvError::Inversion("LU solve failed".into()))?;
            out.row_mut(t).copy_from_slice(sol.as_slice());
        }
        FeatureSet::from_matrix(out)
    }
}

/// Inputs `x̃` such that [`layer_forward`] reproduces the clamped `x`.
pub fn invert_features(x: &FeatureSet, params: &FeatureLayerParams) -> Result<FeatureSet> {
    Inversion::new(params)?.apply(x)
}

pub fn layer_forward(x: &FeatureSet, params: &FeatureLayerParams) -> Result<FeatureSet> {
    params.check(x)?;
    x.map_points(params.dim(), |p, out| {
        params.pre_activation(p, out);
        out.iter_mut().for_each(|v| *v = v.tanh());
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub d_weight: Matrix,
    pub d_bias: Vec<f64>,
    /// T×D
    pub d_input: Matrix,
}

/// With `g_t = u_t ⊙ (1 - tanh²(W x̃_t + b))`:
/// `dW = Σ_t g_t x̃_tᵀ`, `db = Σ_t g_t`, `dx̃_t = Wᵀ g_t`.
pub fn layer_backward(x: &FeatureSet, params: &FeatureLayerParams, upstream: &Matrix) -> Result<LayerGradients> {
    params.check(x)?;
    let d = params.dim();
    if upstream.rows() != x.len() || upstream.cols() != d {
        return Err(FvError::shape(format!(
            "upstream is {}x{}, expected {}x{d}",
            upstream.rows(),
            upstream.cols(),
            x.len()
        )));
    }
    let mut d_weight = Matrix::zeros(d, d);
    let mut d_bias = vec![0.0; d];
    let mut d_input = Matrix::zeros(x.len(), d);
    let mut g = vec![0.0; d];
    for t in 0..x.len() {
        let xt = x.point(t);
        params.pre_activation(xt, &mut g);
        for (gi, u) in g.iter_mut().zip(upstream.row(t)) {
            let y = gi.tanh();
            *gi = u * (1.0 - y * y);
        }
        for r in 0..d {
            d_bias[r] += g[r];
            for c in 0..d {
                d_weight[(r, c)] += g[r] * xt[c];
            }
        }
        let out = d_input.row_mut(t);
        for c in 0..d {
            out[c] = (0..d).map(|r| params.weight[(r, c)] * g[r]).sum();
        }
    }
    Ok(LayerGradients { d_weight, d_bias, d_input })
}
