//! Data-side building blocks for in-domain remote-sensing pre-training.
//!
//! This crate holds everything that does not need a tensor runtime: dataset
//! ingestion (classification folders, color-coded segmentation masks, box
//! annotations), deterministic splits and statistics, image augmentation,
//! the checkpoint archive format with backbone transplantation, learning-rate
//! schedules, and the full evaluation metric suite.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};
