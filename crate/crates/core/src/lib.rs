//! Panel-data financial fraud classification.
//!
//! The crate covers the whole path from a (company, year) feature panel to
//! an explained prediction:
//!
//! - [`data`]: indicator schema, panel dataset, fraud labels and CSV I/O.
//! - [`anomaly`]: isolation forest scoring and gray-sample removal.
//! - [`features`]: missing-value handling, z-scoring, the panel to image
//!   transform and SMOTE balancing.
//! - [`nn`]: tensors, layers, loss, Adam and the two-block convolutional
//!   network with exact forward and backward passes.
//! - [`train`] and [`metrics`]: splitting, training loop, AUC/F-beta and
//!   threshold sweeps.
//! - [`baseline`]: L1-penalised logistic regression.
//! - [`explain`]: Grad-CAM, layer representation grids and PGM/PPM export.
//! - [`synth`]: a seeded synthetic panel generator with ground truth.
//! - [`pipeline`] and [`config`]: the command implementations behind the CLI.

pub mod anomaly;
pub mod baseline;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
