//! Tensor-side models and training loops on candle: ResNet backbones,
//! supervised and SimSiam pre-training, DeepLabV3-style segmentation and an
//! FPN adapter for two-stage detectors.

pub mod backbone;
pub mod data;
pub mod detection;
pub mod error;
pub mod heads;
pub mod layers;
pub mod optim;
pub mod params;
pub mod segmentation;
pub mod simsiam;
pub mod supervised;
pub mod train;

pub use error::{Error, Result};
