//! Differentiable Fisher-Vector encoding.
//!
//! The crate provides every stage needed to train a Fisher-Vector classifier
//! end to end with back-propagation:
//!
//! * [`gmm`]: diagonal Gaussian mixtures, k-means++/EM fitting, the
//!   constraint-free reparameterization and posterior gradients.
//! * [`fisher`]: the Fisher-Vector forward pass and its analytic backward pass
//!   with respect to mixture parameters and input descriptors.
//! * [`normalization`]: signed power + L2 normalization and its Jacobian.
//! * [`feature_layer`]: a trainable `tanh(W x + b)` descriptor transform.
//! * [`svm`]: a linear SVM trained by dual coordinate ascent, plus average
//!   precision.
//! * [`data_io`]: binary feature/model formats, PCA, subsampling and synthetic
//!   data.
//! * [`pipeline`]: batching, the two training phases, evaluation and the 2D
//!   point-shifting demo.
//!
//! Per-image work inside a batch runs on rayon when the `parallel` feature is
//! enabled (the default); results do not depend on the worker count.

pub mod data_io;
pub mod error;
pub mod feature_layer;
pub mod fisher;
pub mod gmm;
pub mod gradcheck;
pub mod matrix;
pub mod normalization;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod svm;

pub use data_io::{Dataset, FeatureSet, LabeledImage};
pub use error::{FvError, Result};
pub use feature_layer::FeatureLayerParams;
pub use fisher::{FisherVector, FvGradients, SufficientStats};
pub use matrix::Matrix;
pub use gmm::{GmmParams, PosteriorMatrix, RawGmmParams};
pub use normalization::NormConfig;
pub use pipeline::{TrainConfig, TrainMode, TrainState};
pub use svm::{EvalReport, SvmModel};
