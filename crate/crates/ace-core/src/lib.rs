//! Core library for ACE-style anomaly detection with concept explanations.
//!
//! A shared MLP encoder is trained on two objectives at once: a
//! transformation-classification task (each training image is passed through a
//! fixed bank of geometric transformations and the encoder must keep features
//! of the same transformation close to that transformation's centroid) and a
//! concept-prediction task (a small sigmoid head must recover binary concept
//! annotations from the feature vector). At test time, normality is scored
//! either from softmax probabilities over centroid distances or from kNN
//! distances in feature space, and the concept head provides a human-readable
//! explanation alongside each score.
//!
//! The crate is `no_std`-compatible (with `alloc`); enable the default `std`
//! feature for use in ordinary binaries.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod math;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transforms;

use alloc::string::String;
use core::fmt;

/// Library-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; the message names the operation.
    ShapeMismatch(String),
    /// A value or configuration field is out of its legal range.
    InvalidArgument(String),
    /// A tape evaluation was missing a binding for a named input.
    MissingInput(String),
    /// A computation produced NaN or infinity where a finite value is required.
    NonFinite(String),
    /// Training aborted because the loss left the finite range.
    Diverged {
        epoch: usize,
        batch: usize,
        last_total: f64,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::MissingInput(name) => write!(f, "missing input binding: {name}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Diverged {
                epoch,
                batch,
                last_total,
            } => write!(
                f,
                "training diverged at epoch {epoch}, batch {batch} \
                 (last finite total loss {last_total})"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub use data::{generate_synthetic, one_vs_all_split, Dataset, OneVsAllSplit, Sample, SyntheticSpec};
pub use harness::{
    run_experiment, run_one_vs_all, sweep_alpha, sweep_concept_fraction, Backbone, CellSummary,
    ClassSelection, ExperimentConfig, ExperimentOutcome, OneVsAllOutcome, RunReport, SweepPoint,
};
pub use image::Image;
pub use metrics::{concept_accuracy, roc_auc, spearman_permutation_test, spearman_rho};
pub use model::{ModelConfig, ModelParams};
pub use objective::{Centroids, LossBreakdown};
pub use scoring::{normality_score, KnnIndex, ScoredSample};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
pub use train::{train, LossRecord, TrainOutcome, TrainSettings};
pub use transforms::{GeoTransform, TransformBank};
