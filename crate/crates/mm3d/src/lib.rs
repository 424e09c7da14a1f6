//! Volumetric lesion detection on synthetic slice stacks.
//!
//! The detector refines a sparse set of learnable proposals through cascade
//! heads that mix per-slice RoI features into volume-level features via
//! malignancy-weighted fusion, without adding parameters over its 2D
//! counterpart. The crate bundles the phantom data generator, the 2D/3D
//! detector and its fusion variants, baseline pipelines, the training loop,
//! and FROC/AUC evaluation.

pub mod tensor;

pub mod error;
pub mod nn;

pub mod baselines;
pub mod cli;
pub mod config;
pub mod detector;
pub mod features;
pub mod metrics;
pub mod phantom;
pub mod training;

pub use error::MmError;
