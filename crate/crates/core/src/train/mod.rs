//! Adam and the three training loops: LcGAN, segmenter, real/fake classifier.

mod adam;
mod classifier;
mod gan;
mod segmenter;

pub use adam::{Adam, AdamConfig};
pub use classifier::{train_classifier, ClassifierOutcome};
pub use gan::{generate, train_lcgan, GanEpoch, GanHistory, GanStep, LcganTrainer, GAN_HISTORY_HEADER};
pub use segmenter::{train_segmenter, SegEpoch, SegHistory, SEG_HISTORY_HEADER};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::rng::{derive, tag, Rng};
use crate::tensor::{Gradients, Tensor, TensorError};

pub const DEFAULT_LAMBDA_L1: f64 = 100.0;
pub const DEFAULT_BATCH: usize = 4;
pub const EPOCH_GRID: [usize; 4] = [10, 50, 100, 200];
pub const SEG_BATCH: usize = 2;
/// Cross-entropy weight of every lesion class; background keeps 1.
pub const SEG_LESION_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_l1: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Reshuffle the sample order every epoch.
    pub shuffle: bool,
    /// Epochs after which the epoch callback is told to snapshot.
    pub snapshot_epochs: Vec<usize>,
    /// Per-class cross-entropy weights for the segmenter.
    pub class_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn gan(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: DEFAULT_BATCH,
            lambda_l1: DEFAULT_LAMBDA_L1,
            seed,
            adam: AdamConfig::GAN,
            shuffle: true,
            snapshot_epochs: Vec::new(),
            class_weights: None,
        }
    }

    pub fn segmenter(epochs: usize, seed: u64) -> Self {
        let mut weights = vec![SEG_LESION_WEIGHT; crate::nn::NUM_CLASSES];
        weights[0] = 1.0;
        TrainConfig {
            adam: AdamConfig::SEGMENTER,
            batch_size: SEG_BATCH,
            class_weights: Some(weights),
            ..Self::gan(epochs, seed)
        }
    }

    pub fn classifier(epochs: usize, seed: u64) -> Self {
        TrainConfig { adam: AdamConfig::SEGMENTER, batch_size: 8, ..Self::gan(epochs, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Config(format!("lambda_l1 must be finite and non-negative, got {}", self.lambda_l1)));
        }
        self.adam.validate()
    }
}

/// Gradients of every bound parameter, keyed by name.
pub(crate) fn param_grads(bound: &Bound, grads: &Gradients) -> Result<IndexMap<String, Tensor>> {
    bound
        .iter()
        .map(|(name, v)| match grads.get(v) {
            Some(g) => Ok((name.to_string(), g.clone())),
            None => Err(Error::MissingGradient(name.to_string())),
        })
        .collect()
}

/// Sample order for one epoch.
pub(crate) fn epoch_order(n: usize, cfg: &TrainConfig, stream: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        idx.shuffle(&mut Rng::seed_from_u64(derive(cfg.seed, &[tag(stream), epoch as u64])));
    }
    idx
}

/// Tags a non-finite tensor error with where training was.
pub(crate) fn locate<T>(r: Result<T>, stage: &'static str, epoch: usize, batch: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(source @ TensorError::NonFinite { .. }) => Error::NonFinite { stage, epoch, batch, source },
        other => other,
    })
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
