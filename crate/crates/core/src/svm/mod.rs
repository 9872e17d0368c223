//! One-vs-rest linear SVMs trained by stochastic dual coordinate ascent.
//!
//! Every input is augmented with a constant `1` so the bias lives in the last
//! coordinate of `theta` and is regularized with the rest. The solver
//! maximizes `D(α) = Σα - ½‖θ‖²` with `θ = Σ α_i y_i x̂_i`, `0 ≤ α_i ≤ C/N`.

use rand::seq::SliceRandom;

use crate::error::{FvError, Result};
use crate::matrix::dot;
use crate::rng;

#[derive(Debug, Clone)]
pub struct SdcaOptions {
    /// `None` means `C = N`.
    pub c: Option<f64>,
    pub gap_tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Offset into the SDCA random streams, one per class.
    pub stream: u64,
}

impl Default for SdcaOptions {
    fn default() -> Self {
        SdcaOptions { c: None, gap_tol: 0.01, max_epochs: 50, seed: 0, stream: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// Weights followed by the bias coordinate.
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub c: f64,
    /// `(primal - dual) / N` after each epoch, starting with the initial point.
    pub gap_history: Vec<f64>,
    /// Dual objective after each epoch, starting with the initial point.
    pub dual_history: Vec<f64>,
    pub epochs: usize,
}

impl SvmModel {
    /// Model with the given weights and no training history.
    pub fn from_theta(theta: Vec<f64>) -> Self {
        SvmModel { theta, alpha: Vec::new(), c: 0.0, gap_history: Vec::new(), dual_history: Vec::new(), epochs: 0 }
    }

    /// FV dimension (without the bias coordinate).
    pub fn dim(&self) -> usize {
        self.theta.len().saturating_sub(1)
    }

    pub fn weights(&self) -> &[f64] {
        &self.theta[..self.dim()]
    }

    pub fn bias(&self) -> f64 {
        self.theta.last().copied().unwrap_or(0.0)
    }

    pub fn duality_gap(&self) -> f64 {
        self.gap_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn converged(&self, gap_tol: f64) -> bool {
        self.duality_gap() < gap_tol
    }

    #[inline]
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(self.weights(), x) + self.bias()
    }
}

fn check_training_set(fvs: &[Vec<f64>], labels: &[f64]) -> Result<usize> {
    if fvs.len() != labels.len() {
        return Err(FvError::shape(format!("{} vectors but {} labels", fvs.len(), labels.len())));
    }
    if fvs.len() < 2 {
        return Err(FvError::EmptyInput("SDCA needs at least two samples".into()));
    }
    let dim = fvs[0].len();
    if fvs.iter().any(|v| v.len() != dim) {
        return Err(FvError::shape("training vectors differ in length"));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(FvError::InvalidParameter("labels must be +1 or -1".into()));
    }
    let pos = labels.iter().filter(|&&y| y > 0.0).count();
    if pos == 0 || pos == labels.len() {
        return Err(FvError::DegenerateLabels("only one class present".into()));
    }
    Ok(dim)
}

#[inline]
fn augmented_dot(theta: &[f64], x: &[f64]) -> f64 {
    dot(&theta[..x.len()], x) + theta[x.len()]
}

fn objectives(theta: &[f64], alpha: &[f64], fvs: &[Vec<f64>], labels: &[f64], box_c: f64) -> (f64, f64) {
    let half_sq = 0.5 * dot(theta, theta);
    let hinge: f64 = fvs
        .iter()
        .zip(labels)
        .map(|(x, y)| (1.0 - y * augmented_dot(theta, x)).max(0.0))
        .sum();
    (half_sq + box_c * hinge, alpha.iter().sum::<f64>() - half_sq)
}

/// Recomputes `Σ α_i y_i x̂_i` from scratch.
pub fn theta_from_duals(alpha: &[f64], fvs: &[Vec<f64>], labels: &[f64]) -> Vec<f64> {
    let dim = fvs.first().map_or(0, Vec::len);
    let mut theta = vec![0.0; dim + 1];
    for ((a, x), y) in alpha.iter().zip(fvs).zip(labels) {
        let s = a * y;
        for (t, v) in theta.iter_mut().zip(x) {
            *t += s * v;
        }
        theta[dim] += s;
    }
    theta
}

pub fn sdca_train(fvs: &[Vec<f64>], labels: &[f64], opts: &SdcaOptions) -> Result<SvmModel> {
    sdca_train_warm(fvs, labels, opts, None)
}

/// SDCA starting from `warm` dual variables (clipped into the box) when given.
pub fn sdca_train_warm(
    fvs: &[Vec<f64>],
    labels: &[f64],
    opts: &SdcaOptions,
    warm: Option<&[f64]>,
) -> Result<SvmModel> {
    let dim = check_training_set(fvs, labels)?;
    let n = fvs.len();
    let c = opts.c.unwrap_or(n as f64);
    if !(c > 0.0) || !c.is_finite() {
        return Err(FvError::InvalidParameter(format!("C must be positive, got {c}")));
    }
    let box_c = c / n as f64;
    let mut alpha = match warm {
        Some(w) if w.len() == n => w.iter().map(|a| a.clamp(0.0, box_c)).collect(),
        _ => vec![0.0; n],
    };
    let mut theta = theta_from_duals(&alpha, fvs, labels);
    let sq_norms: Vec<f64> = fvs.iter().map(|x| dot(x, x) + 1.0).collect();

    let (p, d) = objectives(&theta, &alpha, fvs, labels, box_c);
    let mut gap_history = vec![(p - d) / n as f64];
    let mut dual_history = vec![d];
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::seeded(opts.seed, rng::stream::SDCA_BASE + opts.stream);
    let mut epochs = 0;

    while epochs < opts.max_epochs && gap_history[gap_history.len() - 1] >= opts.gap_tol {
        order.shuffle(&mut r);
        for &i in &order {
            let y = labels[i];
            let x = &fvs[i];
            let margin = y * augmented_dot(&theta, x);
            let next = (alpha[i] + (1.0 - margin) / sq_norms[i]).clamp(0.0, box_c);
            let delta = next - alpha[i];
            if delta != 0.0 {
                alpha[i] = next;
                let s = delta * y;
                for (t, v) in theta.iter_mut().zip(x) {
                    *t += s * v;
                }
                theta[dim] += s;
            }
        }
        epochs += 1;
        let (p, d) = objectives(&theta, &alpha, fvs, labels, box_c);
        gap_history.push((p - d) / n as f64);
        dual_history.push(d);
    }
    log::debug!("sdca: {epochs} epochs, gap {:.3e}", gap_history[gap_history.len() - 1]);
    Ok(SvmModel { theta, alpha, c, gap_history, dual_history, epochs })
}

pub fn decision_scores(model: &SvmModel, fvs: &[Vec<f64>]) -> Result<Vec<f64>> {
    fvs.iter()
        .map(|x| {
            if x.len() != model.dim() {
                Err(FvError::shape(format!("vector has length {}, model expects {}", x.len(), model.dim())))
            } else {
                Ok(model.score(x))
            }
        })
        .collect()
}

/// Upstream gradient `-y_i θ` (bias dropped) for every item, independent of
/// the item's margin.
pub fn backward_signal(labels: &[f64], model: &SvmModel) -> Vec<Vec<f64>> {
    labels.iter().map(|y| model.weights().iter().map(|t| -y * t).collect()).collect()
}

/// Mean over positives of precision at each positive's rank, ranking by
/// descending score with ties broken by ascending index.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FvError::shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&y| y > 0.0).count();
    if positives == 0 {
        return Err(FvError::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

pub fn accuracy(scores: &[f64], labels: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores.iter().zip(labels).filter(|(s, y)| (**s > 0.0) == (**y > 0.0)).count();
    correct as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub accuracy: f64,
    pub duality_gap: f64,
}

pub fn evaluate(model: &SvmModel, fvs: &[Vec<f64>], labels: &[f64]) -> Result<EvalReport> {
    let scores = decision_scores(model, fvs)?;
    Ok(EvalReport {
        ap: average_precision(&scores, labels)?,
        accuracy: accuracy(&scores, labels),
        duality_gap: model.duality_gap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Points at distance ≥ `margin` on either side of a random hyperplane
    /// through the origin.
    pub(crate) fn separable(n: usize, dim: usize, margin: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut r = rng::seeded(seed, 0);
        let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let wn = dot(&w, &w).sqrt();
        let w: Vec<f64> = w.iter().map(|v| v / wn).collect();
        let mut fvs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            let mut x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let proj = dot(&x, &w);
            let target = y * (margin + r.random_range(0.0..1.0));
            for (xi, wi) in x.iter_mut().zip(&w) {
                *xi += (target - proj) * wi;
            }
            fvs.push(x);
            labels.push(y);
        }
        (fvs, labels)
    }

    #[test]
    fn separable_pair() {
        let fvs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let labels = vec![1.0, -1.0];
        let m = sdca_train(&fvs, &labels, &SdcaOptions::default()).unwrap();
        assert!(m.converged(0.01));
        assert!(m.epochs <= 5);
        let s = decision_scores(&m, &fvs).unwrap();
        assert!(s[0] > 0.0 && s[1] < 0.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let fvs = vec![vec![1.0], vec![2.0]];
        let r = sdca_train(&fvs, &[1.0, 1.0], &SdcaOptions::default());
        assert!(matches!(r, Err(FvError::DegenerateLabels(_))));
    }

    #[test]
    fn separable_two_hundred_points() {
        let (fvs, labels) = separable(200, 10, 0.5, 4);
        let m = sdca_train(&fvs, &labels, &SdcaOptions::default()).unwrap();
        assert!(m.converged(0.01), "gap {}", m.duality_gap());
        let s = decision_scores(&m, &fvs).unwrap();
        assert_eq!(accuracy(&s, &labels), 1.0);
        for w in m.dual_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        let primal: Vec<f64> = m.gap_history.iter().zip(&m.dual_history).map(|(g, d)| g * 200.0 + d).collect();
        assert!(primal.iter().zip(&m.dual_history).all(|(p, d)| p >= &(d - 1e-9)));
    }

    #[test]
    fn primal_dual_link_and_box() {
        let (fvs, labels) = separable(60, 5, 0.1, 9);
        let m = sdca_train(&fvs, &labels, &SdcaOptions { max_epochs: 7, gap_tol: 0.0, ..Default::default() }).unwrap();
        assert!(m.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        let fresh = theta_from_duals(&m.alpha, &fvs, &labels);
        let scale = fresh.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let err = fresh.iter().zip(&m.theta).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err <= 1e-9 * scale, "{err}");
    }

    #[test]
    fn warm_start_resumes() {
        let (fvs, labels) = separable(80, 4, 0.5, 2);
        let opts = SdcaOptions::default();
        let a = sdca_train(&fvs, &labels, &opts).unwrap();
        let b = sdca_train_warm(&fvs, &labels, &opts, Some(&a.alpha)).unwrap();
        assert_eq!(b.epochs, 0);
        assert!(a.theta.iter().zip(&b.theta).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn scores_are_linear() {
        let zero = SvmModel::from_theta(vec![0.0; 4]);
        assert_eq!(decision_scores(&zero, &[vec![1.0, 2.0, 3.0]]).unwrap(), vec![0.0]);
        let m = SvmModel::from_theta(vec![0.5, -1.0, 2.0, 0.0]);
        let s = decision_scores(&m, &[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(2.0 * s[0], s[1]);
        assert!(decision_scores(&m, &[vec![1.0]]).is_err());
    }

    #[test]
    fn backward_signal_ignores_margin() {
        let m = SvmModel::from_theta(vec![0.5, -1.0, 7.0]);
        let s = backward_signal(&[1.0, -1.0, 1.0], &m);
        assert_eq!(s[0], vec![-0.5, 1.0]);
        assert_eq!(s[1], vec![0.5, -1.0]);
        assert_eq!(s[0], s[2]);
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[4.0, 3.0, 2.0, 1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap(), 1.0);
        let ap = average_precision(&[4.0, 3.0, 2.0, 1.0], &[-1.0, -1.0, 1.0, 1.0]).unwrap();
        assert!((ap - (1.0 / 3.0 + 2.0 / 4.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.4167).abs() < 1e-4);
        assert_eq!(average_precision(&[0.0, 1.0], &[1.0, -1.0]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[1.0], &[-1.0]), Err(FvError::UndefinedMetric(_))));
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(average_precision(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[1.0, 1.0], &[-1.0, 1.0]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_maps(
            scores in proptest::collection::vec(-10.0f64..10.0, 2..40),
            seed in 0u64..1000,
        ) {
            let mut r = rng::seeded(seed, 0);
            let mut labels: Vec<f64> = scores.iter().map(|_| if r.random_bool(0.4) { 1.0 } else { -1.0 }).collect();
            labels[0] = 1.0;
            let base = average_precision(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() * 5.0 + 1.0).collect();
            prop_assert_eq!(base, average_precision(&mapped, &labels).unwrap());
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn gap_never_negative_and_box_holds(seed in 0u64..200) {
            let (fvs, labels) = separable(30, 3, 0.0, seed);
            let m = sdca_train(&fvs, &labels, &SdcaOptions { seed, gap_tol: 0.0, max_epochs: 10, ..Default::default() }).unwrap();
            prop_assert!(m.gap_history.iter().all(|&g| g >= -1e-9));
            prop_assert!(m.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!(m.dual_history.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }
}
