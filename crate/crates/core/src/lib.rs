//! Adaptation-protocol laboratory on embedding-space datasets.
//!
//! The crate composes linear probing (LP), fine-tuning (FT) and their
//! combinations with feature-space augmentations and virtual adversarial
//! training on the penultimate representation, and scores the resulting
//! models with a safety-oriented evaluation battery: ID/OOD accuracy, mean
//! corruption accuracy, RMS calibration error and anomaly-detection AUROC.
//!
//! Everything runs on small dense matrices so that whole protocol sweeps fit
//! on a desk: [`synth`] generates a benchmark with a controlled distribution
//! shift and pretrains an MLP trunk that stands in for a large feature
//! extractor.

pub mod augment;
pub mod datamodel;
mod error;
pub mod gradcheck;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod protocols;
pub mod rng;
pub mod synth;
pub mod vat;

pub use error::{Error, Result};
