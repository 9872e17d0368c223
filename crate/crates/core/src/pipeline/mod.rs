//! Two-phase training: fit the mixture and SVMs, then jointly update the
//! mixture (and optionally a feature layer) by SGD on the SVM backward signal.

pub mod bench;
mod shift;

pub use shift::{shift_demo, ShiftConfig, ShiftStep, ShiftTrace};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data_io::{subsample, Checkpoint, Dataset, FeatureSet};
use crate::error::{FvError, Result};
use crate::feature_layer::{layer_backward, layer_forward, xavier_init, FeatureLayerParams, Inversion};
use crate::fisher::{fv_backward, fv_backward_params, fv_forward};
use crate::gmm::{em_fit, kmeans_init, EmOptions, GmmParams, KmeansOptions, RawGmmParams, DEFAULT_EPSILON};
use crate::matrix::{clip_norm, dot, Matrix};
use crate::normalization::{norm_backward, norm_forward, NormConfig};
use crate::par::{map_ordered, Workers};
use crate::rng;
use crate::svm::{accuracy, average_precision, sdca_train_warm, EvalReport, SdcaOptions, SvmModel};

/// Which parameters joint training updates besides the SVMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    ThetaOnly,
    ThetaGmm,
    ThetaGmmFeature,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::ThetaOnly => "theta",
            TrainMode::ThetaGmm => "theta-gmm",
            TrainMode::ThetaGmmFeature => "theta-gmm-feature",
        }
    }

    pub fn updates_gmm(self) -> bool {
        self != TrainMode::ThetaOnly
    }

    pub fn uses_layer(self) -> bool {
        self == TrainMode::ThetaGmmFeature
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = FvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(TrainMode::ThetaOnly),
            "theta-gmm" => Ok(TrainMode::ThetaGmm),
            "theta-gmm-feature" => Ok(TrainMode::ThetaGmmFeature),
            _ => Err(FvError::InvalidParameter(format!(
                "unknown mode {s:?} (expected theta, theta-gmm or theta-gmm-feature)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub components: usize,
    pub batch_size: usize,
    pub eta: f64,
    /// SDCA epoch cap for the initial SVM training.
    pub svm_init_epochs: usize,
    /// SDCA epoch cap for each warm-started retraining.
    pub svm_epochs: usize,
    pub gap_tol: f64,
    pub joint_epochs: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub workers: Workers,
    /// Retrain the SVMs every this many batches; `None` means once per epoch.
    pub retrain_every: Option<usize>,
    /// Cap on the number of pooled points used to fit the mixture.
    pub gmm_sample: usize,
    pub epsilon: f64,
    pub em_max_iter: usize,
    /// Per-block L2 bound on parameter gradients.
    pub clip: f64,
    pub norm: NormConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            components: 32,
            batch_size: 24,
            eta: 1e-4,
            svm_init_epochs: 15,
            svm_epochs: 15,
            gap_tol: 0.01,
            joint_epochs: 1,
            mode: TrainMode::ThetaGmmFeature,
            seed: 0,
            workers: Workers::SEQUENTIAL,
            retrain_every: None,
            gmm_sample: 50_000,
            epsilon: DEFAULT_EPSILON,
            em_max_iter: 200,
            clip: 1e3,
            norm: NormConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FvError::InvalidParameter(m.to_string()));
        if self.components == 0 {
            return bad("K must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("eta must be finite and non-negative");
        }
        if !(self.gap_tol > 0.0) {
            return bad("gap tolerance must be positive");
        }
        if self.retrain_every == Some(0) {
            return bad("retrain cadence must be at least one batch");
        }
        if !(self.clip > 0.0) {
            return bad("clip bound must be positive");
        }
        Ok(())
    }

    /// `key=value` lines describing every setting.
    pub fn describe(&self) -> String {
        format!(
            "mode={}\nk={}\nbatch={}\neta={}\nsvm_init_epochs={}\nsvm_epochs={}\ngap_tol={}\nepochs={}\nseed={}\nthreads={}\nretrain_every={}\ngmm_sample={}\nepsilon={}\nclip={}\nalpha={}",
            self.mode,
            self.components,
            self.batch_size,
            self.eta,
            self.svm_init_epochs,
            self.svm_epochs,
            self.gap_tol,
            self.joint_epochs,
            self.seed,
            self.workers.0,
            self.retrain_every.map_or("epoch".to_string(), |r| r.to_string()),
            self.gmm_sample,
            self.epsilon,
            self.clip,
            self.norm.alpha,
        )
    }
}

/// One evaluation point of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub batch: usize,
    pub mode: TrainMode,
    pub class: usize,
    pub ap: f64,
    pub gap: f64,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "epoch,batch,mode,class,ap,gap,loss";

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.epoch, r.batch, r.mode, r.class, r.ap, r.gap, r.loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub gmm: RawGmmParams,
    /// Trainable layer; present only when the mode uses it.
    pub layer: Option<FeatureLayerParams>,
    /// Layer at initialization, used to invert raw descriptors into layer inputs.
    pub init_layer: Option<FeatureLayerParams>,
    pub svms: Vec<SvmModel>,
    pub mode: TrainMode,
    pub norm: NormConfig,
    pub epoch: usize,
    /// Batches processed by joint training so far.
    pub batches: usize,
    /// Times a materialized mixture had to be repaired after an update.
    pub projection_count: usize,
    pub metrics: Vec<MetricRow>,
}

/// Gradients of the surrogate loss with respect to every trainable scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub d_nu: Vec<f64>,
    pub d_zeta: Matrix,
    pub d_mu: Matrix,
    pub d_weight: Option<Matrix>,
    pub d_bias: Option<Vec<f64>>,
    pub loss: f64,
}

impl ParamGrads {
    pub fn zeros(state: &TrainState) -> Self {
        let (k, d) = (state.gmm.components(), state.gmm.dim());
        ParamGrads {
            d_nu: vec![0.0; k],
            d_zeta: Matrix::zeros(k, d),
            d_mu: Matrix::zeros(k, d),
            d_weight: state.layer.as_ref().map(|_| Matrix::zeros(d, d)),
            d_bias: state.layer.as_ref().map(|_| vec![0.0; d]),
            loss: 0.0,
        }
    }

    fn add(&mut self, other: &ParamGrads) {
        self.d_nu.iter_mut().zip(&other.d_nu).for_each(|(a, b)| *a += b);
        self.d_zeta.add_scaled(1.0, &other.d_zeta);
        self.d_mu.add_scaled(1.0, &other.d_mu);
        if let (Some(a), Some(b)) = (self.d_weight.as_mut(), other.d_weight.as_ref()) {
            a.add_scaled(1.0, b);
        }
        if let (Some(a), Some(b)) = (self.d_bias.as_mut(), other.d_bias.as_ref()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.loss += other.loss;
    }

    /// Same order as [`TrainState::trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.d_nu.clone();
        v.extend_from_slice(self.d_zeta.as_slice());
        v.extend_from_slice(self.d_mu.as_slice());
        if let (Some(w), Some(b)) = (&self.d_weight, &self.d_bias) {
            v.extend_from_slice(w.as_slice());
            v.extend_from_slice(b);
        }
        v
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        if self.d_nu.iter().any(|v| !v.is_finite()) {
            Some("nu")
        } else if !self.d_zeta.is_finite() {
            Some("zeta")
        } else if !self.d_mu.is_finite() {
            Some("mu")
        } else if self.d_weight.as_ref().is_some_and(|w| !w.is_finite()) {
            Some("W")
        } else if self.d_bias.as_ref().is_some_and(|b| b.iter().any(|v| !v.is_finite())) {
            Some("b")
        } else {
            None
        }
    }

    /// Clips each block to `max` in L2 norm; returns how many were clipped.
    fn clip(&mut self, max: f64) -> usize {
        let mut n = usize::from(clip_norm(&mut self.d_nu, max));
        n += usize::from(clip_norm(self.d_zeta.as_mut_slice(), max));
        n += usize::from(clip_norm(self.d_mu.as_mut_slice(), max));
        if let Some(w) = self.d_weight.as_mut() {
            n += usize::from(clip_norm(w.as_mut_slice(), max));
        }
        if let Some(b) = self.d_bias.as_mut() {
            n += usize::from(clip_norm(b, max));
        }
        n
    }
}

/// Summary of one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Surrogate loss summed over the batch, before the update.
    pub loss: f64,
    pub images: usize,
    pub clipped_blocks: usize,
}

/// One image as seen by a training step: layer input and labels.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub input: &'a FeatureSet,
    pub labels: &'a [i8],
}

impl TrainState {
    /// State with the given parameters and no SVMs or history.
    pub fn new(
        gmm: RawGmmParams,
        layer: Option<FeatureLayerParams>,
        mode: TrainMode,
        norm: NormConfig,
    ) -> Result<Self> {
        if mode.uses_layer() != layer.is_some() {
            return Err(FvError::InvalidParameter(format!("mode {mode} and feature layer presence disagree")));
        }
        if let Some(l) = &layer {
            if l.dim() != gmm.dim() {
                return Err(FvError::shape(format!("layer dimension {} vs mixture dimension {}", l.dim(), gmm.dim())));
            }
        }
        Ok(TrainState {
            gmm,
            init_layer: layer.clone(),
            layer,
            svms: Vec::new(),
            mode,
            norm,
            epoch: 0,
            batches: 0,
            projection_count: 0,
            metrics: Vec::new(),
        })
    }

    pub fn fv_len(&self) -> usize {
        (2 * self.gmm.dim() + 1) * self.gmm.components()
    }

    /// Maps raw descriptors to layer inputs: the inversion through the
    /// initial layer when a layer is in use, the identity otherwise.
    pub fn layer_input(&self, raw: &FeatureSet) -> Result<FeatureSet> {
        match &self.init_layer {
            Some(l) => Inversion::new(l)?.apply(raw),
            None => Ok(raw.clone()),
        }
    }

    pub fn layer_inputs(&self, dataset: &Dataset) -> Result<Vec<FeatureSet>> {
        match &self.init_layer {
            Some(l) => {
                let inv = Inversion::new(l)?;
                dataset.items().iter().map(|i| inv.apply(&i.features)).collect()
            }
            None => Ok(dataset.items().iter().map(|i| (*i.features).clone()).collect()),
        }
    }

    /// Trainable scalars in the order `ν, ζ, μ` then `W, b` when the layer is present.
    pub fn trainable(&self) -> Vec<f64> {
        let mut v = self.gmm.nu.clone();
        v.extend_from_slice(self.gmm.zeta.as_slice());
        v.extend_from_slice(self.gmm.means.as_slice());
        if let Some(l) = &self.layer {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_trainable(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.trainable().len() {
            return Err(FvError::shape(format!("expected {} values, got {}", self.trainable().len(), v.len())));
        }
        let (k, d) = (self.gmm.components(), self.gmm.dim());
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        self.gmm.nu = take(k);
        self.gmm.zeta = Matrix::from_vec(k, d, take(k * d))?;
        self.gmm.means = Matrix::from_vec(k, d, take(k * d))?;
        if let Some(l) = self.layer.as_mut() {
            l.weight = Matrix::from_vec(d, d, take(d * d))?;
            l.bias = take(d);
        }
        Ok(())
    }

    /// Combined upstream signal `Σ_c -y_c θ_c` over the FV coordinates.
    fn upstream(&self, labels: &[i8]) -> Result<Vec<f64>> {
        if labels.len() != self.svms.len() {
            return Err(FvError::shape(format!("{} labels for {} classifiers", labels.len(), self.svms.len())));
        }
        let mut u = vec![0.0; self.fv_len()];
        for (svm, &y) in self.svms.iter().zip(labels) {
            if svm.dim() != u.len() {
                return Err(FvError::shape(format!("classifier has {} weights, FV has {}", svm.dim(), u.len())));
            }
            let y = f64::from(y);
            u.iter_mut().zip(svm.weights()).for_each(|(a, t)| *a -= y * t);
        }
        Ok(u)
    }

    /// Gradient of `Σ_c -y_c θ_cᵀ φ(F(x))` for one image.
    pub fn image_gradient(&self, item: BatchItem<'_>) -> Result<ParamGrads> {
        let gmm = self.gmm.materialize();
        self.image_gradient_with(&gmm, item)
    }

    fn image_gradient_with(&self, gmm: &GmmParams, item: BatchItem<'_>) -> Result<ParamGrads> {
        let x = match &self.layer {
            Some(l) => layer_forward(item.input, l)?,
            None => item.input.clone(),
        };
        let (fv, gamma, _) = fv_forward(&x, gmm)?;
        let phi = norm_forward(&fv.values, self.norm);
        let upstream = self.upstream(item.labels)?;
        let loss = dot(&upstream, &phi);
        let d_fv = norm_backward(&fv.values, &upstream, self.norm)?;
        let mut out = ParamGrads::zeros(self);
        out.loss = loss;
        let (d_lambda, d_mu, d_sigma2) = match &self.layer {
            Some(l) => {
                let g = fv_backward(&x, gmm, &gamma, &d_fv)?;
                let lg = layer_backward(item.input, l, &g.d_input)?;
                out.d_weight = Some(lg.d_weight);
                out.d_bias = Some(lg.d_bias);
                (g.d_lambda, g.d_mu, g.d_sigma2)
            }
            None => fv_backward_params(&x, gmm, &gamma, &d_fv)?,
        };
        let (d_nu, d_zeta) = self.gmm.backward(&d_lambda, &d_sigma2)?;
        out.d_nu = d_nu;
        out.d_zeta = d_zeta;
        out.d_mu = d_mu;
        if let Some(block) = out.first_non_finite() {
            log::error!(
                "non-finite gradient in block {block} for image {}: loss={loss}, |fv|={}, nu={:?}",
                item.id,
                fv.values.iter().map(|v| v * v).sum::<f64>().sqrt(),
                self.gmm.nu
            );
            return Err(FvError::Numeric(format!("non-finite {block} gradient for image {}", item.id)));
        }
        Ok(out)
    }

    /// Sum of per-image gradients, reduced in batch order.
    pub fn batch_gradient(&self, batch: &[BatchItem<'_>], workers: Workers) -> Result<ParamGrads> {
        let gmm = self.gmm.materialize();
        let per_image = map_ordered(workers, batch, |_, item| self.image_gradient_with(&gmm, *item));
        let mut total = ParamGrads::zeros(self);
        for g in per_image {
            total.add(&g?);
        }
        Ok(total)
    }

    /// Surrogate loss `Σ_i Σ_c -y_ic θ_cᵀ φ(F(x_i))` over a batch.
    pub fn surrogate_loss(&self, batch: &[BatchItem<'_>]) -> Result<f64> {
        let mut total = 0.0;
        for item in batch {
            let phi = self.encode_image(item.input)?;
            total += dot(&self.upstream(item.labels)?, &phi);
        }
        Ok(total)
    }

    /// Normalized Fisher Vector of one image given its layer input.
    pub fn encode_image(&self, input: &FeatureSet) -> Result<Vec<f64>> {
        encode_with(&self.gmm.materialize(), self.layer.as_ref(), self.norm, input)
    }

    pub fn encode_all(&self, inputs: &[FeatureSet], workers: Workers) -> Result<Vec<Vec<f64>>> {
        let gmm = self.gmm.materialize();
        map_ordered(workers, inputs, |_, x| encode_with(&gmm, self.layer.as_ref(), self.norm, x))
            .into_iter()
            .collect()
    }

    /// One SGD step on the mixture and layer parameters enabled by the mode.
    pub fn joint_step(&mut self, batch: &[BatchItem<'_>], config: &TrainConfig) -> Result<StepStats> {
        if !self.mode.updates_gmm() {
            let loss = self.surrogate_loss(batch)?;
            self.batches += 1;
            return Ok(StepStats { loss, images: batch.len(), clipped_blocks: 0 });
        }
        let mut grads = self.batch_gradient(batch, config.workers)?;
        let clipped_blocks = self.apply_gradients(&mut grads, config.eta, config.clip)?;
        self.batches += 1;
        Ok(StepStats { loss: grads.loss, images: batch.len(), clipped_blocks })
    }

    /// Clips `grads` per block and takes one SGD step of size `eta`.
    /// Returns the number of clipped blocks.
    pub fn apply_gradients(&mut self, grads: &mut ParamGrads, eta: f64, clip: f64) -> Result<usize> {
        let (k, d) = (self.gmm.components(), self.gmm.dim());
        if grads.d_nu.len() != k
            || grads.d_zeta.rows() != k
            || grads.d_zeta.cols() != d
            || !grads.d_mu.same_shape(&grads.d_zeta)
            || grads.d_weight.is_some() != self.layer.is_some()
        {
            return Err(FvError::shape("gradient blocks do not match the state"));
        }
        if let Some(block) = grads.first_non_finite() {
            return Err(FvError::Numeric(format!("non-finite {block} gradient")));
        }
        let clipped = grads.clip(clip);
        self.gmm.nu.iter_mut().zip(&grads.d_nu).for_each(|(p, g)| *p -= eta * g);
        self.gmm.zeta.add_scaled(-eta, &grads.d_zeta);
        self.gmm.means.add_scaled(-eta, &grads.d_mu);
        if let (Some(l), Some(dw), Some(db)) = (self.layer.as_mut(), &grads.d_weight, &grads.d_bias) {
            l.weight.add_scaled(-eta, dw);
            l.bias.iter_mut().zip(db).for_each(|(p, g)| *p -= eta * g);
        }
        if !self.trainable().iter().all(|v| v.is_finite()) {
            return Err(FvError::Numeric(format!("parameters diverged after a step with eta={eta}")));
        }
        self.enforce_constraints();
        Ok(clipped)
    }

    /// Repairs the raw parameters if the materialized mixture ever violates
    /// its constraints, counting each repair. The reparameterization should
    /// make this unreachable.
    fn enforce_constraints(&mut self) {
        let p = self.gmm.materialize();
        let sum: f64 = p.weights.iter().sum();
        let weights_ok = (sum - 1.0).abs() <= 1e-12 && p.weights.iter().all(|&w| w > 0.0);
        let vars_ok = p.variances.as_slice().iter().all(|&v| v > self.gmm.epsilon && v.is_finite());
        if weights_ok && vars_ok {
            return;
        }
        self.projection_count += 1;
        log::warn!("materialized mixture violated its constraints; projecting");
        for z in self.gmm.nu.iter_mut() {
            *z = z.clamp(-crate::gmm::NU_CLAMP, crate::gmm::NU_CLAMP);
        }
        // Below about -46, exp(ζ) vanishes next to ε in double precision.
        for z in self.gmm.zeta.as_mut_slice() {
            *z = z.clamp(-40.0, 700.0);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            gmm: self.gmm.clone(),
            feature_layer: self.layer.clone(),
            thetas: self.svms.iter().map(|s| s.theta.clone()).collect(),
        }
    }

    /// Rebuilds an evaluation state. The initial layer is not stored in a
    /// checkpoint, so it is regenerated from the training seed.
    pub fn from_checkpoint(ckpt: &Checkpoint, seed: u64, norm: NormConfig) -> Result<Self> {
        let (mode, init_layer) = match &ckpt.feature_layer {
            Some(l) => (TrainMode::ThetaGmmFeature, Some(xavier_init(l.dim(), seed)?)),
            None => (TrainMode::ThetaGmm, None),
        };
        let mut state = TrainState::new(ckpt.gmm.clone(), ckpt.feature_layer.clone(), mode, norm)?;
        state.init_layer = init_layer;
        state.svms = ckpt.thetas.iter().map(|t| SvmModel::from_theta(t.clone())).collect();
        Ok(state)
    }

    /// Retrains every class SVM on `fvs`, warm-starting from the current duals.
    pub fn retrain_svms(&mut self, fvs: &[Vec<f64>], dataset: &Dataset, max_epochs: usize, config: &TrainConfig) -> Result<()> {
        let classes: Vec<usize> = (0..dataset.num_classes()).collect();
        let previous = &self.svms;
        let models = map_ordered(config.workers, &classes, |_, &c| {
            let opts = SdcaOptions {
                c: None,
                gap_tol: config.gap_tol,
                max_epochs,
                seed: config.seed,
                stream: c as u64,
            };
            let warm = previous.get(c).map(|m| m.alpha.as_slice()).filter(|a| a.len() == fvs.len());
            sdca_train_warm(fvs, &dataset.class_labels(c), &opts, warm)
        });
        self.svms = models.into_iter().collect::<Result<_>>()?;
        for (c, m) in self.svms.iter().enumerate() {
            if !m.converged(config.gap_tol) {
                log::info!("class {c}: SDCA stopped at gap {:.4} after {} epochs", m.duality_gap(), m.epochs);
            }
        }
        Ok(())
    }

    /// Appends one metrics row per class computed on `fvs`.
    fn log_metrics(&mut self, fvs: &[Vec<f64>], dataset: &Dataset) -> Result<()> {
        let n = fvs.len().max(1) as f64;
        let mut loss = 0.0;
        for (item, phi) in dataset.items().iter().zip(fvs) {
            loss += dot(&self.upstream(&item.labels)?, phi);
        }
        for (c, svm) in self.svms.iter().enumerate() {
            let scores: Vec<f64> = fvs.iter().map(|x| svm.score(x)).collect();
            let ap = average_precision(&scores, &dataset.class_labels(c)).unwrap_or(f64::NAN);
            self.metrics.push(MetricRow {
                epoch: self.epoch,
                batch: self.batches,
                mode: self.mode,
                class: c,
                ap,
                gap: svm.duality_gap(),
                loss: loss / n,
            });
        }
        Ok(())
    }
}

fn encode_with(gmm: &GmmParams, layer: Option<&FeatureLayerParams>, norm: NormConfig, input: &FeatureSet) -> Result<Vec<f64>> {
    let (fv, _, _) = match layer {
        Some(l) => fv_forward(&layer_forward(input, l)?, gmm)?,
        None => fv_forward(input, gmm)?,
    };
    Ok(norm_forward(&fv.values, norm))
}

/// Pools descriptors from every image, capped at `cap` points.
fn pooled_points(dataset: &Dataset, cap: usize, seed: u64) -> Result<Matrix> {
    let dim = dataset.dim().ok_or_else(|| FvError::EmptyInput("dataset has no images".into()))?;
    let mut values = Vec::new();
    for item in dataset.items() {
        values.extend_from_slice(item.features.as_slice());
    }
    let all = FeatureSet::new(values.len() / dim, dim, values)?;
    Ok(subsample(&all, cap, seed).into_matrix())
}

/// Fits the mixture by k-means++ and EM on pooled descriptors.
pub fn fit_gmm(dataset: &Dataset, config: &TrainConfig) -> Result<GmmParams> {
    let points = pooled_points(dataset, config.gmm_sample, config.seed)?;
    let kopts = KmeansOptions { epsilon: config.epsilon, ..Default::default() };
    let init = kmeans_init(&points, config.components, config.seed, &kopts)?;
    let eopts = EmOptions { epsilon: config.epsilon, max_iter: config.em_max_iter, seed: config.seed, ..Default::default() };
    let report = em_fit(&points, &init, &eopts)?;
    log::info!(
        "GMM fit: K={} on {} points, mean log-likelihood {:.6}, converged={}",
        config.components,
        points.rows(),
        report.log_likelihood.last().copied().unwrap_or(f64::NAN),
        report.converged
    );
    Ok(report.params)
}

/// Phase 1: mixture fit, layer initialization and initial SVM training.
/// Returns the state and the layer inputs of every training image.
pub fn phase1_init(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainState, Vec<FeatureSet>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FvError::EmptyInput("training set has no images".into()));
    }
    let gmm = fit_gmm(dataset, config)?;
    let raw = gmm.to_raw(config.epsilon)?;
    let layer = if config.mode.uses_layer() { Some(xavier_init(raw.dim(), config.seed)?) } else { None };
    let mut state = TrainState::new(raw, layer, config.mode, config.norm)?;
    let inputs = state.layer_inputs(dataset)?;
    let fvs = state.encode_all(&inputs, config.workers)?;
    state.retrain_svms(&fvs, dataset, config.svm_init_epochs, config)?;
    state.log_metrics(&fvs, dataset)?;
    Ok((state, inputs))
}

/// Runs one epoch of joint training over `inputs` in a shuffled order.
pub fn run_epoch(
    state: &mut TrainState,
    dataset: &Dataset,
    inputs: &[FeatureSet],
    config: &TrainConfig,
    shuffle: &mut rng::Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(shuffle);
    state.epoch += 1;
    let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
    for (b, idx) in batches.iter().enumerate() {
        let batch: Vec<BatchItem<'_>> = idx
            .iter()
            .map(|&i| {
                let item = &dataset.items()[i];
                BatchItem { id: &item.id, input: &inputs[i], labels: &item.labels }
            })
            .collect();
        let stats = state.joint_step(&batch, config)?;
        log::debug!("epoch {} batch {}: loss {:.6}, clipped {}", state.epoch, b, stats.loss, stats.clipped_blocks);
        let last = b + 1 == batches.len();
        let due = config.retrain_every.is_some_and(|r| (b + 1) % r == 0);
        if due || last {
            let fvs = state.encode_all(inputs, config.workers)?;
            state.retrain_svms(&fvs, dataset, config.svm_epochs, config)?;
            state.log_metrics(&fvs, dataset)?;
        }
    }
    Ok(())
}

/// Phase 1 followed by `config.joint_epochs` epochs of joint training.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    let (mut state, inputs) = phase1_init(dataset, config)?;
    let mut shuffle = rng::seeded(config.seed, rng::stream::SHUFFLE);
    for _ in 0..config.joint_epochs {
        run_epoch(&mut state, dataset, &inputs, config, &mut shuffle)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_class: Vec<EvalReport>,
    pub mean_ap: f64,
}

/// Encodes every image with the current parameters and scores it with the
/// current SVMs. Does not modify the state.
pub fn evaluate(dataset: &Dataset, state: &TrainState, workers: Workers) -> Result<Evaluation> {
    if dataset.num_classes() != state.svms.len() {
        return Err(FvError::shape(format!(
            "dataset has {} classes, state has {} classifiers",
            dataset.num_classes(),
            state.svms.len()
        )));
    }
    let inputs = state.layer_inputs(dataset)?;
    let fvs = state.encode_all(&inputs, workers)?;
    let mut per_class = Vec::with_capacity(state.svms.len());
    for (c, svm) in state.svms.iter().enumerate() {
        let labels = dataset.class_labels(c);
        let scores: Vec<f64> = fvs.iter().map(|x| svm.score(x)).collect();
        per_class.push(EvalReport {
            ap: average_precision(&scores, &labels)?,
            accuracy: accuracy(&scores, &labels),
            duality_gap: svm.duality_gap(),
        });
    }
    let mean_ap = per_class.iter().map(|r| r.ap).sum::<f64>() / per_class.len().max(1) as f64;
    Ok(Evaluation { per_class, mean_ap })
}
