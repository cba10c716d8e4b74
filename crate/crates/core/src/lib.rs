// SPDX-License-Identifier: Apache-2.0

//! Generalized zero-shot point cloud segmentation with evidential
//! uncertainty, calibrated stacking and semantic tuning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchgen;
pub mod calibration;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod evidential;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod selfcheck;
pub mod semantics;
pub mod synthesis;

pub use benchgen::BenchSpec;
pub use calibration::{Calibration, CalibrationFactor, ProbabilityVector};
pub use dataset::{Dataset, Scene};
pub use error::{Error, Result};
pub use evidential::{BlOrientation, ConcentrationVector, EvidentialLossWeights, UncertaintyScore};
pub use experiment::{EvalReport, ExperimentManifest, UBarScope};
pub use metrics::{ConfusionMatrix, ReliabilityReport};
pub use pipeline::{ModelParameters, TrainConfig};
pub use semantics::{ClassCatalog, SceneComposition, TuningLayer};
pub use synthesis::DecoderConfig;
