//! Debiased recommendation learning.
//!
//! A matrix-factorization recommender trained on a reweight-and-impute
//! empirical risk. The debiasing parameters (per-example weights, per-pair
//! weights and pseudo-labels) are either supplied by a fixed strategy
//! (IPS, doubly robust, imputation, negative weighting, position IPS, ...)
//! or learned from a small uniformly-collected dataset by alternating a
//! tentative base step, a meta step driven by an analytic one-step
//! hypergradient, and an actual base step.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the experiment
//! harness, and the command line live in the companion `debias` crate.

#![no_std]
// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
mod error;
pub mod framework;
pub mod loss;
pub(crate) mod math;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simulation;
pub mod trainer;
pub mod world;

pub use data::{binarize, to_implicit, DatasetBundle, FeedbackKind, Interaction, ObservationIndicator};
pub use error::{Error, Result};
pub use framework::{debiased_risk, DebiasConfig, PairTable, PropensityTable};
pub use loss::LossKind;
pub use meta::MetaModel;
pub use metrics::MetricsReport;
pub use model::FactorModel;
pub use trainer::{train_autodebias, TrainOutcome, TrainerConfig, Variant};
