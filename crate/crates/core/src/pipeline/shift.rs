//! Moves raw descriptors along the Fisher-Vector gradient of the SVM signal.

use std::io::Write;

use crate::data_io::{Dataset, FeatureSet};
use crate::error::{FvError, Result};
use crate::fisher::{fv_backward_input, fv_forward};
use crate::gmm::GmmParams;
use crate::matrix::l2_norm;
use crate::normalization::{norm_backward, norm_forward, NormConfig};
use crate::par::{map_ordered, Workers};
use crate::pipeline::{fit_gmm, TrainConfig};
use crate::svm::{accuracy, sdca_train_warm, SdcaOptions, SvmModel};

#[derive(Debug, Clone)]
pub struct ShiftConfig {
    pub steps: usize,
    pub eta: f64,
    pub components: usize,
    pub seed: u64,
    pub svm_epochs: usize,
    pub gap_tol: f64,
    pub workers: Workers,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { steps: 40, eta: 0.1, components: 1, seed: 0, svm_epochs: 50, gap_tol: 0.01, workers: Workers::SEQUENTIAL }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftStep {
    pub step: usize,
    /// Training accuracy of the SVM refit on the current points.
    pub accuracy: f64,
    /// Distance between the two class means of the normalized FVs.
    pub separation: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ShiftTrace {
    pub labels: Vec<f64>,
    /// `positions[s][i]` holds image `i`'s points before step `s + 1`.
    pub positions: Vec<Vec<FeatureSet>>,
    pub steps: Vec<ShiftStep>,
    pub gmm: GmmParams,
}

impl ShiftTrace {
    pub fn write_positions_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,image,point,label,x,y")?;
        for (s, images) in self.positions.iter().enumerate() {
            for (i, set) in images.iter().enumerate() {
                for (t, p) in set.points().enumerate() {
                    writeln!(out, "{s},{i},{t},{},{},{}", self.labels[i], p[0], p[1])?;
                }
            }
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,accuracy,separation,gap")?;
        for s in &self.steps {
            writeln!(out, "{},{},{},{}", s.step, s.accuracy, s.separation, s.gap)?;
        }
        Ok(())
    }
}

fn class_separation(fvs: &[Vec<f64>], labels: &[f64]) -> f64 {
    let dim = fvs[0].len();
    let (mut pos, mut neg) = (vec![0.0; dim], vec![0.0; dim]);
    let (mut np, mut nn) = (0.0, 0.0);
    for (v, &y) in fvs.iter().zip(labels) {
        let (acc, n) = if y > 0.0 { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        *n += 1.0;
    }
    let diff: Vec<f64> = pos.iter().zip(&neg).map(|(p, q)| p / np - q / nn).collect();
    l2_norm(&diff)
}

/// Fits a mixture once on the initial points, then alternates SVM fitting and
/// moving every point by `-eta · dL/dx`, where `L` is the surrogate loss under
/// the backward signal `-yθ`.
pub fn shift_demo(dataset: &Dataset, cfg: &ShiftConfig) -> Result<ShiftTrace> {
    if dataset.dim() != Some(2) {
        return Err(FvError::shape("shift demo needs a two-dimensional dataset"));
    }
    if dataset.num_classes() != 1 {
        return Err(FvError::shape("shift demo needs exactly one binary class"));
    }
    let labels = dataset.class_labels(0);
    let gmm = fit_gmm(
        dataset,
        &TrainConfig { components: cfg.components, seed: cfg.seed, ..TrainConfig::default() },
    )?;
    let norm = NormConfig::default();
    let mut points: Vec<FeatureSet> = dataset.items().iter().map(|i| (*i.features).clone()).collect();
    let mut positions = Vec::with_capacity(cfg.steps + 1);
    let mut steps = Vec::with_capacity(cfg.steps + 1);
    let mut svm: Option<SvmModel> = None;
    for step in 0..=cfg.steps {
        let encoded = map_ordered(cfg.workers, &points, |_, x| -> Result<_> {
            let (fv, gamma, _) = fv_forward(x, &gmm)?;
            let phi = norm_forward(&fv.values, norm);
            Ok((fv.values, gamma, phi))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let fvs: Vec<Vec<f64>> = encoded.iter().map(|e| e.2.clone()).collect();
        let opts = SdcaOptions { gap_tol: cfg.gap_tol, max_epochs: cfg.svm_epochs, seed: cfg.seed, ..Default::default() };
        let model = sdca_train_warm(&fvs, &labels, &opts, svm.as_ref().map(|m| m.alpha.as_slice()))?;
        let scores: Vec<f64> = fvs.iter().map(|x| model.score(x)).collect();
        steps.push(ShiftStep {
            step,
            accuracy: accuracy(&scores, &labels),
            separation: class_separation(&fvs, &labels),
            gap: model.duality_gap(),
        });
        positions.push(points.clone());
        if step == cfg.steps {
            break;
        }
        let items: Vec<usize> = (0..points.len()).collect();
        let moved = map_ordered(cfg.workers, &items, |_, &i| -> Result<FeatureSet> {
            let (fv, gamma, _) = &encoded[i];
            let u: Vec<f64> = model.weights().iter().map(|t| -labels[i] * t).collect();
            let d_fv = norm_backward(fv, &u, norm)?;
            let dx = fv_backward_input(&points[i], &gmm, gamma, &d_fv)?;
            let values = points[i].as_slice().iter().zip(dx.as_slice()).map(|(x, g)| x - cfg.eta * g).collect();
            FeatureSet::new(points[i].len(), 2, values)
        });
        points = moved.into_iter().collect::<Result<_>>()?;
        svm = Some(model);
    }
    Ok(ShiftTrace { labels, positions, steps, gmm })
}
