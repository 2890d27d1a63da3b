//! Multitracer PET/CT lesion segmentation.
//!
//! The crate covers the full pipeline: NIfTI ingestion, resampling and
//! intensity normalisation, patch augmentation with PET/CT misalignment,
//! a residual-encoder U-Net with lesion and organ heads, multi-dataset
//! pretraining, fine-tuning, sliding-window ensemble inference under a time
//! budget, and lesion-level evaluation.

pub mod augment;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
