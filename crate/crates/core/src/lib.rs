//! Synthetic data augmentation for long-tailed image classification.
//!
//! The pipeline fine-tunes a class-conditional inpainting diffusion model on
//! a long-tailed dataset with anomaly-weighted oversampling, generates
//! per-class synthetic budgets to level the class counts, filters
//! out-of-distribution samples, and measures the classification gain under a
//! stratified k-fold protocol.

pub mod config;
pub mod container;
pub mod classifier;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod oodfilter;
pub mod segmentation;
pub mod selection;
pub mod toydata;
pub mod nn;

pub use config::PipelineConfig;
pub use error::{Error, Result};
