//! Lesion-conditional GAN augmentation for hemorrhage segmentation,
//! run end to end on synthetic CT phantoms.

pub mod augment;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
