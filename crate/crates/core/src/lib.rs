//! Open-set recognition with one-vs-all prototype classifiers.
//!
//! A small MLP maps inputs to features; each known class owns a prototype
//! and a distance threshold, and the resulting K logits are read either as
//! K sigmoid (one-vs-all) classifiers or, combined by Dempster–Shafer
//! evidence fusion, as K+1 posteriors whose extra entry is the probability
//! that the input belongs to no known class. The same posteriors drive
//! closed-set classification, OOD rejection and misclassification rejection.
//!
//! Modules, bottom-up: [`rng`] and [`data`] for reproducible synthetic sets,
//! [`model`] for parameters and forward passes, [`posterior`] for the
//! probability transforms, [`loss`] for objectives and gradients,
//! [`trainer`] for SGD, [`rejection`] and [`metrics`] for scoring,
//! [`evaluation`] for reports and dumps, and [`experiment`] for the
//! end-to-end pipeline behind the CLI.

// Validation uses `!(x > 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod posterior;
pub mod rejection;
pub mod rng;
pub mod trainer;

pub use data::{Dataset, SplitSpec, OOD_LABEL};
pub use error::{Error, Result};
pub use evaluation::{evaluate, MetricsReport};
pub use loss::{LossBreakdown, LossConfig, Objective};
pub use model::{ModelParams, ThresholdMode};
pub use posterior::{dste_combine, PosteriorK1};
pub use rejection::Rule;
pub use trainer::{train, TrainConfig, TrainLog};
