//! Adversarial domain adaptation for semantic segmentation with a prompted
//! segmentor, a frozen foundation surrogate and an attention-guided decoder.

pub mod adversarial;
pub mod autograd;
pub mod benchmark;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod foundation;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod runner;
pub mod segmentor;
pub mod self_training;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
