//! Evaluation: Dice, per-class tables, thresholded detection, FCN score,
//! blurriness, classifier acceptance, and model ranking.

mod blur;
mod quality;

pub use blur::{blur_fft, blur_laplacian_var, LAPLACIAN};
pub use quality::{rank_models, ImageQuality, QualityReport, QUALITY_HEADER};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{argmax_classes, sigmoid_prob, Mode, Network, NUM_CLASSES};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const FOREGROUND: [u8; 5] = [1, 2, 3, 4, 5];
pub const MIN_FP_AREA: usize = 200;
pub const MIN_TP_DSC: f64 = 0.25;
/// Images per inference batch.
const EVAL_BATCH: usize = 16;

/// Dice over pixels whose class is in `classes`, treated as one binary
/// foreground. Two empty restricted masks score 1.
pub fn dsc(s: &[u8], g: &[u8], classes: &[u8]) -> Result<f64> {
    if s.len() != g.len() {
        return Err(Error::InvalidInput(format!("mask sizes differ: {} vs {}", s.len(), g.len())));
    }
    let mut member = [false; 256];
    classes.iter().for_each(|&c| member[c as usize] = true);
    let (mut ns, mut ng, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in s.iter().zip(g) {
        let (ia, ib) = (member[a as usize], member[b as usize]);
        ns += ia as usize;
        ng += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if ns + ng == 0 { 1.0 } else { 2.0 * both as f64 / (ns + ng) as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationTable {
    /// Mean Dice per lesion class over images whose ground truth has it;
    /// `None` when no image does.
    pub per_class: [Option<f64>; 5],
    /// Mean over images of the foreground (classes 1..5 merged) Dice.
    pub mean_dsc: f64,
    pub per_image: Vec<f64>,
}

pub fn segmentation_table(preds: &[Vec<u8>], truths: &[&[u8]]) -> Result<SegmentationTable> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty set".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} ground truths", preds.len(), truths.len())));
    }
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    let mut per_image = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(truths) {
        per_image.push(dsc(p, g, &FOREGROUND)?);
        for c in FOREGROUND {
            if g.contains(&c) {
                sums[c as usize - 1] += dsc(p, g, &[c])?;
                counts[c as usize - 1] += 1;
            }
        }
    }
    let per_class = std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64));
    let mean_dsc = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(SegmentationTable { per_class, mean_dsc, per_image })
}

/// Argmax masks for `images` (each `size * size`, `[0, 1]`), running-stat
/// batch norm, batches evaluated on independent tapes.
pub fn predict_masks(seg: &Network, images: &[&[f64]], exec: Exec) -> Result<Vec<Vec<u8>>> {
    let s = seg.spec.image_size;
    let plane = s * s;
    if let Some(bad) = images.iter().find(|im| im.len() != plane) {
        return Err(Error::InvalidInput(format!("image of {} pixels, segmenter expects {s}x{s}", bad.len())));
    }
    let chunks: Vec<&[&[f64]]> = images.chunks(EVAL_BATCH).collect();
    let out = exec.map(chunks.len(), |i| -> Result<Vec<u8>> {
        let chunk = chunks[i];
        let data: Vec<f64> = chunk.iter().flat_map(|im| im.iter().copied()).collect();
        let x = Tensor::new(vec![chunk.len(), 1, s, s], data)?;
        let logits = seg.infer(&x, Mode::Eval, &mut seeded(0))?;
        Ok(argmax_classes(&logits))
    });
    let mut masks = Vec::with_capacity(images.len());
    for flat in out {
        masks.extend(flat?.chunks(plane).map(<[u8]>::to_vec));
    }
    Ok(masks)
}

pub fn evaluate_segmentation(seg: &Network, samples: &[Sample]) -> Result<SegmentationTable> {
    let images: Vec<&[f64]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let preds = predict_masks(seg, &images, Exec::default())?;
    let truths: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
    segmentation_table(&preds, &truths)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when `tp + fp == 0`.
    pub precision: Option<f64>,
    /// `None` when `tp + fn == 0`.
    pub recall: Option<f64>,
}

/// Per (image, lesion class): ground truth present with Dice at least
/// `min_tp_dsc` is a hit, below it a miss; absent ground truth with a
/// predicted area of at least `min_fp_area` pixels is a false alarm, and
/// smaller predicted areas are noise and ignored.
pub fn detection_pr(preds: &[Vec<u8>], truths: &[&[u8]], min_fp_area: usize, min_tp_dsc: f64) -> Result<Detection> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} ground truths", preds.len(), truths.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(truths) {
        let mut gt_area = [0usize; NUM_CLASSES];
        let mut pred_area = [0usize; NUM_CLASSES];
        g.iter().for_each(|&c| gt_area[c as usize] += 1);
        p.iter().for_each(|&c| pred_area[c as usize] += 1);
        for c in FOREGROUND {
            if gt_area[c as usize] > 0 {
                if dsc(p, g, &[c])? >= min_tp_dsc {
                    tp += 1;
                } else {
                    fn_ += 1;
                }
            } else if pred_area[c as usize] >= min_fp_area {
                fp += 1;
            }
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Detection { tp, fp, fn_, precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_) })
}

/// Mean Dice of the reference segmenter's output on generated images
/// against the masks that conditioned them.
pub fn fcn_score(images: &[&[f64]], masks: &[&[u8]], reference: &Network) -> Result<f64> {
    let preds = predict_masks(reference, images, Exec::default())?;
    Ok(segmentation_table(&preds, masks)?.mean_dsc)
}

/// All three quality criteria for one generator's images, which were
/// conditioned on `masks`. `clf_real_frac` counts `P(real) >= threshold`.
pub fn score_model(
    model_id: &str,
    epochs: usize,
    images: &[&[f64]],
    masks: &[&[u8]],
    reference: &Network,
    clf: &Network,
    threshold: f64,
) -> Result<QualityReport> {
    let s = reference.spec.image_size;
    let preds = predict_masks(reference, images, Exec::default())?;
    let table = segmentation_table(&preds, masks)?;
    let probs = classifier_probs(clf, images)?;
    let mut per_image = Vec::with_capacity(images.len());
    for (index, im) in images.iter().enumerate() {
        per_image.push(ImageQuality {
            index,
            dsc: table.per_image[index],
            blur_fft: blur_fft(im, s, s)?,
            blur_lapvar: blur_laplacian_var(im, s, s)?,
            p_real: probs[index],
        });
    }
    let n = per_image.len() as f64;
    Ok(QualityReport {
        model_id: model_id.to_string(),
        epochs,
        fcn_score: table.mean_dsc,
        blur_fft: per_image.iter().map(|q| q.blur_fft).sum::<f64>() / n,
        blur_lapvar: per_image.iter().map(|q| q.blur_lapvar).sum::<f64>() / n,
        clf_real_frac: acceptance_from_probs(&probs, threshold).fraction,
        per_image,
    })
}

/// P(real) per image from the real/fake classifier.
pub fn classifier_probs(clf: &Network, images: &[&[f64]]) -> Result<Vec<f64>> {
    let s = clf.spec.image_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        if let Some(bad) = chunk.iter().find(|im| im.len() != s * s) {
            return Err(Error::InvalidInput(format!("image of {} pixels, classifier expects {s}x{s}", bad.len())));
        }
        let data: Vec<f64> = chunk.iter().flat_map(|im| im.iter().copied()).collect();
        let x = Tensor::new(vec![chunk.len(), 1, s, s], data)?;
        let logits = clf.infer(&x, Mode::Eval, &mut seeded(0))?;
        out.extend(logits.data().iter().map(|&z| sigmoid_prob(z)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Acceptance {
    pub fraction: f64,
    pub flags: Vec<bool>,
}

/// An image is accepted when `P(real) >= threshold`.
pub fn acceptance_from_probs(probs: &[f64], threshold: f64) -> Acceptance {
    let flags: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let n = flags.iter().filter(|&&f| f).count();
    let fraction = if flags.is_empty() { 0.0 } else { n as f64 / flags.len() as f64 };
    Acceptance { fraction, flags }
}

pub fn classifier_acceptance(images: &[&[f64]], clf: &Network, threshold: f64) -> Result<Acceptance> {
    Ok(acceptance_from_probs(&classifier_probs(clf, images)?, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_examples() {
        let s = [1, 1, 1, 1, 0, 0];
        let g = [0, 0, 1, 1, 1, 1];
        assert_eq!(dsc(&s, &g, &FOREGROUND).unwrap(), 0.5);
        assert_eq!(dsc(&s, &s, &FOREGROUND).unwrap(), 1.0);
        assert_eq!(dsc(&[1, 0], &[0, 1], &FOREGROUND).unwrap(), 0.0);
        assert_eq!(dsc(&[0, 0], &[0, 0], &FOREGROUND).unwrap(), 1.0);
        assert!(dsc(&[0], &[0, 0], &FOREGROUND).is_err());
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(segmentation_table(&[], &[]).is_err());
    }

    #[test]
    fn acceptance_counts() {
        let a = acceptance_from_probs(&[0.05, 0.2, 0.6, 0.9], 0.5);
        assert_eq!(a.flags, vec![false, false, true, true]);
        assert_eq!(a.fraction, 0.5);
        assert_eq!(acceptance_from_probs(&[0.05, 0.2], 1e-12).fraction, 1.0);
    }
}
