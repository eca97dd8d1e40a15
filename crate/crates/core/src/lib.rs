//! Inductive unsupervised domain adaptation for few-shot classification.
//!
//! The crate trains a representation extractor on labeled source data and
//! unlabeled target data, clusters the encoded target data with k-means,
//! turns the clusters into pseudo classes and trains a prototypical few-shot
//! classifier on the union of source and pseudo-labeled target data.
//!
//! Module map:
//!
//! - [`numerics`]: dense matrices, a reverse-mode tape and scalar primitives
//! - [`models`]: the extractor MLP, the domain discriminator and SGD
//! - [`losses`]: prototypical cross-entropy, similarity entropy, the
//!   adversarial pair and the annealing schedule
//! - [`sampling`]: datasets, episodes and the pseudo-label merge
//! - [`cluster`]: k-means and pseudo-label assignment
//! - [`metrics`]: accuracy aggregation, Davies-Bouldin and Fowlkes-Mallows
//! - [`pipeline`]: the four training stages, evaluation and ablations
//! - [`synthetic`]: the two-domain Gaussian benchmark generator
//! - [`config`]: flat key-value configuration files

pub mod cluster;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synthetic;

pub use error::{Error, Result};
