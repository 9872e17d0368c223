//! Finite-difference verification of every analytic derivative in the crate.
//!
//! Each block is compared entry by entry against central differences with step
//! [`FD_STEP`]. An entry's error is `|a - n| / max(|a|, |n|)`, or zero when
//! `|a - n|` is below [`ABS_FLOOR`].

use rand::Rng;

use crate::data_io::FeatureSet;
use crate::error::Result;
use crate::feature_layer::{layer_backward, layer_forward, FeatureLayerParams};
use crate::fisher::{fv_backward, fv_forward, jacobian::full_jacobian};
use crate::gmm::{posterior_grad_input, posterior_grad_params, posteriors, GmmParams, RawGmmParams};
use crate::matrix::{dot, Matrix};
use crate::normalization::{norm_backward, norm_forward, NormConfig};
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const ABS_FLOOR: f64 = 1e-9;

/// Central-difference Jacobian of `f` at `x0`: `outputs × inputs`.
pub fn central_difference(x0: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Matrix {
    let mut x = x0.to_vec();
    let mut columns = Vec::with_capacity(x0.len());
    for j in 0..x0.len() {
        x[j] = x0[j] + h;
        let plus = f(&x);
        x[j] = x0[j] - h;
        let minus = f(&x);
        x[j] = x0[j];
        columns.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>());
    }
    let rows = columns.first().map_or(0, Vec::len);
    let mut out = Matrix::zeros(rows, x0.len());
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL
    }
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> BlockResult {
    assert_eq!(analytic.len(), numeric.len(), "block {name}: length mismatch");
    let max_rel_err = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| if a.is_finite() && n.is_finite() { entry_error(*a, *n) } else { f64::INFINITY })
        .fold(0.0, f64::max);
    BlockResult { name: name.to_string(), max_rel_err, entries: analytic.len() }
}

/// Mixture with unnormalized weights in `[0.2, 1)`, means in `[-1, 1)`,
/// variances in `[0.5, 2)` and points in `[-2, 2)`.
pub fn random_instance(k: usize, d: usize, t: usize, seed: u64) -> Result<(FeatureSet, GmmParams)> {
    let mut r = rng::seeded(seed, 0);
    let weights = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
    let means = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let variances = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(0.5..2.0)).collect())?;
    let x = FeatureSet::new(t, d, (0..t * d).map(|_| r.random_range(-2.0..2.0)).collect())?;
    Ok((x, GmmParams { weights, means, variances }))
}

fn random_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn pack(p: &GmmParams) -> Vec<f64> {
    let mut v = p.weights.clone();
    v.extend_from_slice(p.means.as_slice());
    v.extend_from_slice(p.variances.as_slice());
    v
}

fn unpack(v: &[f64], k: usize, d: usize) -> GmmParams {
    GmmParams {
        weights: v[..k].to_vec(),
        means: Matrix::from_vec(k, d, v[k..k + k * d].to_vec()).expect("sized"),
        variances: Matrix::from_vec(k, d, v[k + k * d..].to_vec()).expect("sized"),
    }
}

fn set_like(x: &FeatureSet, v: &[f64]) -> FeatureSet {
    FeatureSet::new(x.len(), x.dim(), v.to_vec()).expect("finite perturbation")
}

/// Every derivative block on one instance. `seed` drives the random upstream
/// vectors and the auxiliary raw/feature-layer parameters.
pub fn check_instance(x: &FeatureSet, p: &GmmParams, seed: u64) -> Result<Vec<BlockResult>> {
    let (k, d, t) = (p.components(), p.dim(), x.len());
    let h = FD_STEP;
    let mut out = Vec::new();
    let mut r = rng::seeded(seed, 1);

    // Posterior derivatives.
    let gamma = posteriors(x, p)?;
    let pg = posterior_grad_params(x, p, &gamma)?;
    let gamma_of = |q: &GmmParams| posteriors(x, q).expect("valid").0.into_vec();
    let numeric = central_difference(&p.weights, h, |w| gamma_of(&GmmParams { weights: w.to_vec(), ..p.clone() }));
    let analytic: Vec<f64> = (0..t * k).flat_map(|tk| (0..k).map(move |s| (tk, s))).map(|(tk, s)| pg.d_lambda(tk / k, tk % k, s)).collect();
    out.push(compare("posterior/lambda", &analytic, numeric.as_slice()));

    let numeric = central_difference(p.means.as_slice(), h, |m| {
        gamma_of(&GmmParams { means: Matrix::from_vec(k, d, m.to_vec()).expect("sized"), ..p.clone() })
    });
    let mut analytic = Vec::new();
    for tk in 0..t * k {
        for s in 0..k {
            for e in 0..d {
                analytic.push(pg.d_mu(tk / k, tk % k, s, e));
            }
        }
    }
    out.push(compare("posterior/mu", &analytic, numeric.as_slice()));

    let numeric = central_difference(p.variances.as_slice(), h, |v| {
        gamma_of(&GmmParams { variances: Matrix::from_vec(k, d, v.to_vec()).expect("sized"), ..p.clone() })
    });
    let mut analytic = Vec::new();
    for tk in 0..t * k {
        for s in 0..k {
            for e in 0..d {
                analytic.push(pg.d_sigma2(tk / k, tk % k, s, e));
            }
        }
    }
    out.push(compare("posterior/sigma2", &analytic, numeric.as_slice()));

    let gi = posterior_grad_input(x, p, &gamma)?;
    let numeric = central_difference(x.as_slice(), h, |v| posteriors(&set_like(x, v), p).expect("valid").0.into_vec());
    let mut analytic = vec![0.0; t * k * t * d];
    for tt in 0..t {
        for kk in 0..k {
            for e in 0..d {
                analytic[(tt * k + kk) * t * d + tt * d + e] = gi[tt][(kk, e)];
            }
        }
    }
    out.push(compare("posterior/input", &analytic, numeric.as_slice()));

    // Explicit Fisher-Vector Jacobian.
    let jac = full_jacobian(x, p)?;
    let fv_of = |xs: &FeatureSet, q: &GmmParams| fv_forward(xs, q).expect("valid").0.values;
    let numeric = central_difference(&pack(p), h, |v| fv_of(x, &unpack(v, k, d)));
    let n_fv = jac.layout.len();
    let split = |m: &Matrix, lo: usize, hi: usize| -> Vec<f64> {
        (0..n_fv).flat_map(|i| m.row(i)[lo..hi].to_vec()).collect()
    };
    for (name, lo, hi) in [("fv/lambda", 0, k), ("fv/mu", k, k + k * d), ("fv/sigma2", k + k * d, k + 2 * k * d)] {
        out.push(compare(name, &split(&jac.d_params, lo, hi), &split(&numeric, lo, hi)));
    }
    let numeric = central_difference(x.as_slice(), h, |v| fv_of(&set_like(x, v), p));
    out.push(compare("fv/input", jac.d_input.as_slice(), numeric.as_slice()));

    // Fused vector-Jacobian products.
    let u = random_vec(&mut r, n_fv);
    let grads = fv_backward(x, p, &gamma, &u)?;
    let scalar = |xs: &FeatureSet, q: &GmmParams| vec![dot(&u, &fv_of(xs, q))];
    let numeric = central_difference(&pack(p), h, |v| scalar(x, &unpack(v, k, d)));
    let mut analytic = grads.d_lambda.clone();
    analytic.extend_from_slice(grads.d_mu.as_slice());
    analytic.extend_from_slice(grads.d_sigma2.as_slice());
    out.push(compare("fv_vjp/params", &analytic, numeric.as_slice()));
    let numeric = central_difference(x.as_slice(), h, |v| scalar(&set_like(x, v), p));
    out.push(compare("fv_vjp/input", grads.d_input.as_slice(), numeric.as_slice()));

    // Reparameterization.
    let raw = RawGmmParams::new(
        random_vec(&mut r, k),
        Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(0.5f64..2.0).ln()).collect())?,
        p.means.clone(),
        crate::gmm::DEFAULT_EPSILON,
    )?;
    let mat = raw.materialize();
    let gamma_m = posteriors(x, &mat)?;
    let g = fv_backward(x, &mat, &gamma_m, &u)?;
    let (d_nu, d_zeta) = raw.backward(&g.d_lambda, &g.d_sigma2)?;
    let numeric = central_difference(&raw.nu, h, |v| {
        let q = RawGmmParams { nu: v.to_vec(), ..raw.clone() };
        scalar(x, &q.materialize())
    });
    out.push(compare("reparam/nu", &d_nu, numeric.as_slice()));
    let numeric = central_difference(raw.zeta.as_slice(), h, |v| {
        let q = RawGmmParams { zeta: Matrix::from_vec(k, d, v.to_vec()).expect("sized"), ..raw.clone() };
        scalar(x, &q.materialize())
    });
    out.push(compare("reparam/zeta", d_zeta.as_slice(), numeric.as_slice()));

    // Power + L2 normalization, away from the non-differentiable zero set.
    let v: Vec<f64> = (0..n_fv)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    let cfg = NormConfig::default();
    let analytic = norm_backward(&v, &u, cfg)?;
    let numeric = central_difference(&v, h, |w| vec![dot(&u, &norm_forward(w, cfg))]);
    out.push(compare("norm", &analytic, numeric.as_slice()));

    // Feature layer.
    let layer = FeatureLayerParams {
        weight: Matrix::from_vec(d, d, random_vec(&mut r, d * d))?,
        bias: random_vec(&mut r, d),
    };
    let up = Matrix::from_vec(t, d, random_vec(&mut r, t * d))?;
    let lg = layer_backward(x, &layer, &up)?;
    let layer_loss = |xs: &FeatureSet, l: &FeatureLayerParams| {
        vec![dot(up.as_slice(), layer_forward(xs, l).expect("valid").as_slice())]
    };
    let numeric = central_difference(layer.weight.as_slice(), h, |w| {
        layer_loss(x, &FeatureLayerParams { weight: Matrix::from_vec(d, d, w.to_vec()).expect("sized"), ..layer.clone() })
    });
    out.push(compare("layer/weight", lg.d_weight.as_slice(), numeric.as_slice()));
    let numeric = central_difference(&layer.bias, h, |b| {
        layer_loss(x, &FeatureLayerParams { bias: b.to_vec(), ..layer.clone() })
    });
    out.push(compare("layer/bias", &lg.d_bias, numeric.as_slice()));
    let numeric = central_difference(x.as_slice(), h, |v| layer_loss(&set_like(x, v), &layer));
    out.push(compare("layer/input", lg.d_input.as_slice(), numeric.as_slice()));

    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub instances: usize,
    /// Worst result per block over all instances, in first-seen order.
    pub blocks: Vec<BlockResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockResult::passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:>8} {:>14} {:>6}\n", "block", "entries", "max_rel_err", "ok");
        for b in &self.blocks {
            s.push_str(&format!(
                "{:<18} {:>8} {:>14.3e} {:>6}\n",
                b.name,
                b.entries,
                b.max_rel_err,
                if b.passed() { "yes" } else { "NO" }
            ));
        }
        s
    }
}

/// Every combination of `K, D ∈ {1,2,3}` and `T ∈ {1,4,8}` (27 instances).
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut blocks: Vec<BlockResult> = Vec::new();
    let mut instances = 0;
    for k in 1..=3 {
        for d in 1..=3 {
            for t in [1, 4, 8] {
                let inst_seed = seed.wrapping_mul(1000).wrapping_add(instances as u64);
                let (x, p) = random_instance(k, d, t, inst_seed)?;
                for b in check_instance(&x, &p, inst_seed)? {
                    match blocks.iter_mut().find(|a| a.name == b.name) {
                        Some(a) => {
                            a.entries += b.entries;
                            a.max_rel_err = a.max_rel_err.max(b.max_rel_err);
                        }
                        None => blocks.push(b),
                    }
                }
                instances += 1;
            }
        }
    }
    Ok(SuiteReport { instances, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let j = central_difference(&[1.0, 2.0], 1e-3, |x| vec![x[0] * x[0], x[0] * x[1]]);
        assert!((j[(0, 0)] - 2.0).abs() < 1e-9);
        assert!(j[(0, 1)].abs() < 1e-12);
        assert!((j[(1, 0)] - 2.0).abs() < 1e-9);
        assert!((j[(1, 1)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn error_floor() {
        assert_eq!(entry_error(1e-12, 0.0), 0.0);
        assert!((entry_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(!compare("x", &[1.0], &[f64::NAN]).passed());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let (x, p) = random_instance(2, 2, 4, 5).unwrap();
        let blocks = check_instance(&x, &p, 5).unwrap();
        assert!(blocks.iter().all(BlockResult::passed), "{blocks:?}");
        let bad = compare("bad", &[1.0, 2.0], &[1.0, 2.001]);
        assert!(!bad.passed());
    }

    #[test]
    fn default_suite_passes() {
        let report = run_suite(0).unwrap();
        assert_eq!(report.instances, 27);
        assert!(report.passed(), "\n{}", report.table());
    }
}
