use super::{epoch_order, locate, mean, param_grads, Adam, TrainConfig};
use crate::data::{image_batch, mask_batch, Sample};
use crate::error::{Error, Result};
use crate::metrics::evaluate_segmentation;
use crate::nn::{ForwardCtx, Mode, Network, NetworkKind, NUM_CLASSES};
use crate::rng::seeded;
use crate::tensor::Tape;

pub const SEG_HISTORY_HEADER: &str = "epoch,train_ce,val_dsc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegHistory {
    pub epochs: Vec<SegEpoch>,
    /// Cross-entropy of every optimizer step in order.
    pub steps: Vec<f64>,
}

impl SegHistory {
    /// `val_dsc` is left empty for epochs without validation.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SEG_HISTORY_HEADER}\n");
        for e in &self.epochs {
            let val = e.val_dsc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{val}\n", e.epoch, e.train_ce));
        }
        out
    }
}

/// Trains on `original` followed by `augmented`, reshuffled each epoch
/// when `cfg.shuffle` is set. Background pixels count in the loss.
pub fn train_segmenter(
    mut seg: Network,
    original: &[Sample],
    augmented: &[Sample],
    validation: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<(Network, SegHistory)> {
    cfg.validate()?;
    if seg.kind() != NetworkKind::Segmenter {
        return Err(Error::InvalidSpec(format!("expected a segmenter, got {:?}", seg.kind())));
    }
    let pool: Vec<&Sample> = original.iter().chain(augmented).collect();
    if pool.is_empty() {
        return Err(Error::InvalidInput("segmenter training set is empty".into()));
    }
    let s = seg.spec.image_size;
    if let Some(bad) = pool.iter().find(|x| x.image.len() != s * s || x.mask.len() != s * s) {
        return Err(Error::InvalidInput(format!("sample {}/{} is not {s}x{s}", bad.patient, bad.slice)));
    }
    if let Some(w) = &cfg.class_weights {
        if w.len() != NUM_CLASSES || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("class_weights needs {NUM_CLASSES} non-negative values")));
        }
    }
    let mut opt = Adam::new(cfg.adam);
    let mut rng = seeded(0);
    let mut history = SegHistory::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(pool.len(), cfg, "seg-order", epoch);
        let mut losses = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| pool[i]).collect();
            let step = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let bound = seg.bind(&mut tape, true);
                let x = tape.constant(image_batch(&batch, s, false));
                let mut ctx = ForwardCtx::new(Mode::Train, &mut rng);
                let logits = seg.forward(&mut tape, &bound, x, &mut ctx)?;
                let stats = std::mem::take(&mut ctx.stats);
                let target: Vec<usize> = mask_batch(&batch).into_iter().map(usize::from).collect();
                let loss = tape.softmax_cross_entropy(logits, &target, cfg.class_weights.as_deref())?;
                let grads = param_grads(&bound, &tape.backward(loss)?)?;
                opt.update(&mut seg.params, &grads)?;
                seg.update_running_stats(&stats);
                Ok(tape.value(loss).item())
            })();
            losses.push(locate(step, "train_segmenter", epoch, b)?);
        }
        let val_dsc = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_segmentation(&seg, v)?.mean_dsc),
            _ => None,
        };
        history.epochs.push(SegEpoch { epoch, train_ce: mean(&losses), val_dsc });
        history.steps.extend(losses);
    }
    Ok((seg, history))
}
