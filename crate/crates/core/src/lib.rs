//! Regularized bi-level sample reweighting for open-set semi-supervised
//! point-cloud classification.
//!
//! A task network (shared per-point MLP, max-pool, classifier head) is trained
//! on labeled clouds plus a consistency loss on unlabeled clouds. Each
//! unlabeled cloud's loss is scaled by a weight in `(0, 1)` produced by a
//! small predictor network, and the predictor is itself trained on the
//! gradient of a held-out validation loss taken through one unrolled task
//! step, plus temporal, entropy and outlier-detection regularizers.

pub mod acceptance;
pub mod autodiff;
pub mod bilevel;
pub mod datagen;
pub mod error;
pub mod models;
pub mod regularizers;
pub mod report;
pub mod rng;
pub mod ssl_losses;
pub mod training;

pub use error::{Error, Result};
