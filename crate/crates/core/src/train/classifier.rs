use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{locate, mean, param_grads, Adam, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::classifier_probs;
use crate::nn::{ForwardCtx, Mode, Network, NetworkKind};
use crate::rng::{derive, seeded, tag, Rng};
use crate::tensor::{Tape, Tensor};

/// Share of each class held out for the accuracy estimate.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutcome {
    /// Mean bce per epoch.
    pub losses: Vec<f64>,
    /// Accuracy at P(real) >= 0.5 on the held-out images; `None` when too
    /// few images were given to hold any out.
    pub heldout_accuracy: Option<f64>,
}

fn split_holdout(n: usize, seed: u64, class: &str) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Rng::seed_from_u64(derive(seed, &[tag("clf-holdout"), tag(class)])));
    let k = ((n as f64 * HOLDOUT_FRACTION).floor() as usize).min(n - 1);
    let train = idx.split_off(k);
    (train, idx)
}

/// Binary real (1) / fake (0) training. Every batch is half real, half
/// fake; the smaller class is cycled to cover the larger one each epoch.
pub fn train_classifier(
    mut clf: Network,
    real: &[&[f64]],
    fake: &[&[f64]],
    cfg: &TrainConfig,
) -> Result<(Network, ClassifierOutcome)> {
    cfg.validate()?;
    if clf.kind() != NetworkKind::Classifier {
        return Err(Error::InvalidSpec(format!("expected a classifier, got {:?}", clf.kind())));
    }
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidInput("classifier needs both real and fake images".into()));
    }
    let s = clf.spec.image_size;
    if let Some(bad) = real.iter().chain(fake).find(|im| im.len() != s * s) {
        return Err(Error::InvalidInput(format!("image of {} pixels, classifier expects {s}x{s}", bad.len())));
    }
    let (real_tr, real_ho) = split_holdout(real.len(), cfg.seed, "real");
    let (fake_tr, fake_ho) = split_holdout(fake.len(), cfg.seed, "fake");
    let half = (cfg.batch_size / 2).max(1);
    let steps = real_tr.len().max(fake_tr.len()).div_ceil(half);

    let mut opt = Adam::new(cfg.adam);
    let mut rng = seeded(0);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order_rng = Rng::seed_from_u64(derive(cfg.seed, &[tag("clf-order"), epoch as u64]));
        let (mut r, mut f) = (real_tr.clone(), fake_tr.clone());
        if cfg.shuffle {
            r.shuffle(&mut order_rng);
            f.shuffle(&mut order_rng);
        }
        let mut epoch_losses = Vec::with_capacity(steps);
        for b in 0..steps {
            let mut data = Vec::with_capacity(2 * half * s * s);
            let mut labels = Vec::with_capacity(2 * half);
            for j in 0..half {
                data.extend_from_slice(real[r[(b * half + j) % r.len()]]);
                labels.push(1.0);
            }
            for j in 0..half {
                data.extend_from_slice(fake[f[(b * half + j) % f.len()]]);
                labels.push(0.0);
            }
            let step = (|| -> Result<f64> {
                let n = labels.len();
                let mut tape = Tape::new();
                let bound = clf.bind(&mut tape, true);
                let x = tape.constant(Tensor::new(vec![n, 1, s, s], data)?);
                let mut ctx = ForwardCtx::new(Mode::Train, &mut rng);
                let logits = clf.forward(&mut tape, &bound, x, &mut ctx)?;
                let stats = std::mem::take(&mut ctx.stats);
                let loss = tape.bce_with_logits(logits, &Tensor::new(vec![n, 1], labels)?)?;
                let grads = param_grads(&bound, &tape.backward(loss)?)?;
                opt.update(&mut clf.params, &grads)?;
                clf.update_running_stats(&stats);
                Ok(tape.value(loss).item())
            })();
            epoch_losses.push(locate(step, "train_classifier", epoch, b)?);
        }
        losses.push(mean(&epoch_losses));
    }

    let heldout_accuracy = if real_ho.is_empty() && fake_ho.is_empty() {
        None
    } else {
        let images: Vec<&[f64]> = real_ho.iter().map(|&i| real[i]).chain(fake_ho.iter().map(|&i| fake[i])).collect();
        let probs = classifier_probs(&clf, &images)?;
        let correct = probs.iter().enumerate().filter(|&(i, &p)| (p >= 0.5) == (i < real_ho.len())).count();
        Some(correct as f64 / probs.len() as f64)
    };
    Ok((clf, ClassifierOutcome { losses, heldout_accuracy }))
}
