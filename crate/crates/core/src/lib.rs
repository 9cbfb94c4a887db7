//! Two-stage thalamic nuclei segmentation: a contrast-synthesis network maps
//! conventional MPRAGE to white-matter-nulled contrast and a dual-head
//! encoder-decoder predicts the whole thalamus and twelve intra-thalamic
//! structures. Also carries the losses, evaluation metrics, cohort
//! statistics, and a phantom generator used to exercise everything end to end.

pub mod engine;
pub mod error;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod report;
pub mod sampler;
pub mod stats;
pub mod volume;
pub mod workflow;

pub use error::{Error, Result};
