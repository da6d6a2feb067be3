use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{write_reports, ReportRow, Summary};
use super::{emit_montage, percent_label, AugMode, ExperimentConfig};
use crate::augment::{augment_dataset, AugmentPolicy};
use crate::data::{quantize_u8, read_dataset, read_pgm, write_pgm, Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{
    detection_pr, predict_masks, rank_models, score_model, segmentation_table, QualityReport, MIN_FP_AREA, MIN_TP_DSC,
};
use crate::nn::{
    build_classifier, build_discriminator, build_generator, build_segmenter, load_checkpoint, save_checkpoint, Network,
    NetworkSpec,
};
use crate::phantom::subset_by_patients;
use crate::rng::{derive, tag, Rng};
use crate::train::{generate, train_classifier, train_lcgan, train_segmenter, GanHistory, TrainConfig};
use rand::SeedableRng;

pub const STAGE_DIR: &str = "stages";
const MONTAGE_ROWS: usize = 8;

pub fn stage_done(dir: &Path, stage: &str) -> bool {
    dir.join(STAGE_DIR).join(format!("{stage}.done")).exists()
}

fn mark(dir: &Path, stage: &str) -> Result<()> {
    let d = dir.join(STAGE_DIR);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let p = d.join(format!("{stage}.done"));
    std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))
}

/// Runs `compute` unless the stage is marked done, then always rebuilds
/// the stage result from disk with `load`, so resumed and fresh runs see
/// the same bytes downstream.
fn stage<T>(dir: &Path, name: &str, label: &str, compute: impl FnOnce() -> Result<()>, load: impl FnOnce() -> Result<T>) -> Result<T> {
    let wrap = |e: Error| Error::Stage { stage: format!("{label}/{name}"), source: Box::new(e) };
    if stage_done(dir, name) {
        log::info!("{label}/{name}: done, skipping");
    } else {
        log::info!("{label}/{name}: running");
        std::fs::create_dir_all(dir).map_err(|e| wrap(Error::io(dir, e)))?;
        compute().map_err(wrap)?;
        mark(dir, name).map_err(wrap)?;
    }
    load().map_err(wrap)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Seed of the named per-percent stream (`"segmenter"`, `"gan"`, ...).
pub fn stage_seed(seed: u64, name: &str, percent: f64) -> u64 {
    derive(seed, &[tag(name), tag(&percent_label(percent))])
}

/// Trains the full-data segmenter used for FCN scores.
pub fn train_reference(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Network> {
    let s = derive(seed, &[tag("reference")]);
    let seg = build_segmenter(NetworkSpec::segmenter(ds.image_size, cfg.seg_base), s)?;
    Ok(train_segmenter(seg, &ds.train, &[], None, &TrainConfig::segmenter(cfg.reference_epochs, s))?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GeneratedEntry {
    index: usize,
    patient: String,
    slice: u32,
    p_real: f64,
    accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GeneratedIndex {
    model_id: String,
    epochs: usize,
    threshold: f64,
    images: Vec<GeneratedEntry>,
}

/// Original and added samples for each augmentation mode.
pub struct TrainingSets {
    pub original: Vec<Sample>,
    pub generated: Vec<Sample>,
    pub traditional: Vec<Sample>,
}

impl TrainingSets {
    pub fn added(&self, mode: AugMode) -> Vec<Sample> {
        match mode {
            AugMode::None => Vec::new(),
            AugMode::Gan => self.generated.clone(),
            AugMode::Traditional => self.traditional.clone(),
            AugMode::Both => self.generated.iter().chain(&self.traditional).cloned().collect(),
        }
    }
}

/// GAN images stay untransformed; traditional copies come from the
/// originals only.
pub fn training_sets(original: &[Sample], generated: Vec<Sample>, policy: &AugmentPolicy) -> Result<TrainingSets> {
    Ok(TrainingSets { original: original.to_vec(), generated, traditional: augment_dataset(original, policy)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub rows: Vec<ReportRow>,
    pub quality: Vec<QualityReport>,
    pub summary: Summary,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a Dataset,
    seed: u64,
    reference: &'a Network,
}

/// Runs every (seed, percent, mode) cell and writes the reports into
/// `cfg.out_dir`. Finished stages are skipped on re-runs.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let ds = read_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("config.toml"), &cfg.to_toml())?;
    let mut rows = Vec::new();
    let mut quality = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = cfg.out_dir.join(format!("seed-{seed}"));
        let label = format!("seed-{seed}");
        let ref_path = seed_dir.join("reference.ckpt");
        let reference = stage(
            &seed_dir,
            "reference",
            &label,
            || save_checkpoint(&train_reference(&ds, cfg, seed)?, &ref_path),
            || load_checkpoint(&ref_path),
        )?;
        let ctx = Ctx { cfg, ds: &ds, seed, reference: &reference };
        for &percent in &cfg.percents {
            let (r, q) = run_percent(&ctx, percent, &seed_dir.join(percent_label(percent)))?;
            rows.extend(r);
            quality.extend(q);
        }
    }
    let summary = write_reports(&cfg.out_dir, &rows, &quality)?;
    Ok(PipelineOutcome { rows, quality, summary })
}

/// Generator snapshot file inside a GAN directory.
pub fn generator_path(gan_dir: &Path, epochs: usize) -> PathBuf {
    gan_dir.join(format!("gen-e{epochs}.ckpt"))
}

/// Trains one LcGAN on `train` up to the last grid epoch, saving a
/// generator snapshot at every grid epoch and `history.csv` into `gan_dir`.
pub fn train_generators(train: &[Sample], cfg: &ExperimentConfig, seed: u64, percent: f64, gan_dir: &Path) -> Result<GanHistory> {
    let first = train.first().ok_or_else(|| Error::InvalidInput("cannot train a GAN on an empty subset".into()))?;
    let size = (first.mask.len() as f64).sqrt() as usize;
    let grid = cfg.grid();
    let gseed = stage_seed(seed, "gan", percent);
    let gen = build_generator(NetworkSpec::generator(size, cfg.gen_base), gseed)?;
    let disc = build_discriminator(NetworkSpec::discriminator(size, cfg.disc_base), gseed ^ 1)?;
    let mut tc = TrainConfig::gan(*grid.last().expect("grid validated"), gseed);
    tc.batch_size = cfg.gan_batch;
    tc.lambda_l1 = cfg.lambda_l1;
    tc.snapshot_epochs = grid;
    std::fs::create_dir_all(gan_dir).map_err(|e| Error::io(gan_dir, e))?;
    let (_, history) = train_lcgan(gen, disc, train, &tc, |epoch, t| {
        if tc.snapshot_epochs.contains(&epoch) {
            save_checkpoint(&t.gen, generator_path(gan_dir, epoch))?;
        }
        Ok(())
    })?;
    write_text(&gan_dir.join("history.csv"), &history.to_csv())?;
    Ok(history)
}

fn run_percent(ctx: &Ctx<'_>, percent: f64, dir: &Path) -> Result<(Vec<ReportRow>, Vec<QualityReport>)> {
    let Ctx { cfg, ds, seed, .. } = *ctx;
    let label = format!("seed-{seed}/{}", percent_label(percent));
    let subset = subset_by_patients(ds, percent, seed)?;
    let size = ds.image_size;
    let needs_gan = cfg.modes.iter().any(|m| matches!(m, AugMode::Gan | AugMode::Both));

    let mut quality = Vec::new();
    let mut generated = Vec::new();
    if needs_gan {
        stage(dir, "gan", &label, || train_generators(&subset.train, cfg, seed, percent, &dir.join("gan")).map(drop), || Ok(()))?;
        let (q, g) = stage(dir, "score", &label, || score_stage(ctx, percent, dir, &subset), || load_scores(dir, &subset))?;
        quality = q;
        generated = g;
    }

    let policy = AugmentPolicy::new(stage_seed(seed, "traditional", percent));
    let sets = training_sets(&subset.train, generated, &policy)?;
    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        let name = format!("seg-{mode}");
        let result = dir.join(&name).join("result.json");
        let row: ReportRow = stage(
            dir,
            &name,
            &label,
            || {
                let sseed = stage_seed(seed, "segmenter", percent);
                let seg = build_segmenter(NetworkSpec::segmenter(size, cfg.seg_base), sseed)?;
                let added = sets.added(mode);
                let tc = TrainConfig::segmenter(cfg.seg_epochs, sseed);
                let (seg, history) = train_segmenter(seg, &sets.original, &added, None, &tc)?;
                let row = evaluate_segmenter(&seg, &ds.test, percent, mode, seed, sets.original.len() + added.len())?;
                let out = dir.join(&name);
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                save_checkpoint(&seg, out.join("segmenter.ckpt"))?;
                write_text(&out.join("history.csv"), &history.to_csv())?;
                write_json(&result, &row)
            },
            || read_json(&result),
        )?;
        log::info!("{label}/{mode}: mean DSC {:.4} on {} training images", row.mean_dsc, row.train_images);
        rows.push(row);
    }
    Ok((rows, quality))
}

/// Test-set DSC, per-class DSC and detection scores as a report row.
pub fn evaluate_segmenter(seg: &Network, test: &[Sample], percent: f64, mode: AugMode, seed: u64, train_images: usize) -> Result<ReportRow> {
    let images: Vec<&[f64]> = test.iter().map(|s| s.image.as_slice()).collect();
    let truths: Vec<&[u8]> = test.iter().map(|s| s.mask.as_slice()).collect();
    let preds = predict_masks(seg, &images, Exec::default())?;
    let table = segmentation_table(&preds, &truths)?;
    let det = detection_pr(&preds, &truths, MIN_FP_AREA, MIN_TP_DSC)?;
    let [dsc_iph, dsc_ivh, dsc_sah, dsc_edh, dsc_sdh] = table.per_class;
    Ok(ReportRow {
        percent,
        mode,
        seed,
        mean_dsc: table.mean_dsc,
        dsc_iph,
        dsc_ivh,
        dsc_sah,
        dsc_edh,
        dsc_sdh,
        precision: det.precision,
        recall: det.recall,
        train_images,
    })
}

fn model_id(seed: u64, percent: f64, epochs: usize) -> String {
    format!("s{seed}-{}-e{epochs}", percent_label(percent))
}

/// Every snapshot's images (one per subset mask, quantized to 8 bits),
/// the real/fake classifier trained on all of them, and one quality
/// report per snapshot.
pub struct ScoredModels {
    pub reports: Vec<QualityReport>,
    pub images: Vec<Vec<Vec<f64>>>,
    pub classifier: Network,
    pub heldout_accuracy: Option<f64>,
}

/// Scores generator snapshots `(epochs, generator)` trained on `subset`.
pub fn score_generators(
    generators: &[(usize, Network)],
    subset: &[Sample],
    reference: &Network,
    cfg: &ExperimentConfig,
    seed: u64,
    percent: f64,
) -> Result<ScoredModels> {
    let first = subset.first().ok_or_else(|| Error::InvalidInput("cannot score on an empty subset".into()))?;
    let size = (first.mask.len() as f64).sqrt() as usize;
    let masks: Vec<&[u8]> = subset.iter().map(|s| s.mask.as_slice()).collect();
    let mut images = Vec::with_capacity(generators.len());
    for (epochs, gen) in generators {
        let mut rng = Rng::seed_from_u64(derive(stage_seed(seed, "generate", percent), &[*epochs as u64]));
        let ims: Vec<Vec<f64>> = generate(gen, &masks, &mut rng)?
            .into_iter()
            .map(|im| im.into_iter().map(|v| quantize_u8(v) as f64 / 255.0).collect())
            .collect();
        images.push(ims);
    }

    let real: Vec<&[f64]> = subset.iter().map(|s| s.image.as_slice()).collect();
    let fake: Vec<&[f64]> = images.iter().flatten().map(Vec::as_slice).collect();
    let cseed = stage_seed(seed, "classifier", percent);
    let clf = build_classifier(NetworkSpec::classifier(size, cfg.clf_base), cseed)?;
    let (mut classifier, outcome) = train_classifier(clf, &real, &fake, &TrainConfig::classifier(cfg.classifier_epochs, cseed))?;
    classifier.quantize_f32();
    log::info!("classifier held-out accuracy {:?}", outcome.heldout_accuracy);

    let mut reports = Vec::with_capacity(generators.len());
    for ((epochs, _), ims) in generators.iter().zip(&images) {
        let ims: Vec<&[f64]> = ims.iter().map(Vec::as_slice).collect();
        let id = model_id(seed, percent, *epochs);
        reports.push(score_model(&id, *epochs, &ims, &masks, reference, &classifier, cfg.threshold)?);
    }
    Ok(ScoredModels { reports, images, classifier, heldout_accuracy: outcome.heldout_accuracy })
}

/// Scores every snapshot, ranks them, and stores the best snapshot's
/// images with their acceptance flags.
fn score_stage(ctx: &Ctx<'_>, percent: f64, dir: &Path, subset: &Dataset) -> Result<()> {
    let Ctx { cfg, seed, reference, .. } = *ctx;
    let size = subset.image_size;
    let generators = cfg.grid().into_iter().map(|e| Ok((e, load_checkpoint(generator_path(&dir.join("gan"), e))?))).collect::<Result<Vec<_>>>()?;
    let scored = score_generators(&generators, &subset.train, reference, cfg, seed, percent)?;
    save_checkpoint(&scored.classifier, dir.join("classifier.ckpt"))?;
    let reports = scored.reports;
    let best = rank_models(&reports)[0].clone();
    let at = reports.iter().position(|r| r.model_id == best.model_id).expect("best is scored");
    let best_images = &scored.images[at];
    let masks: Vec<&[u8]> = subset.train.iter().map(|s| s.mask.as_slice()).collect();
    let real: Vec<&[f64]> = subset.train.iter().map(|s| s.image.as_slice()).collect();

    let gdir = dir.join("generated");
    std::fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
    let mut entries = Vec::new();
    for (i, (s, q)) in subset.train.iter().zip(&best.per_image).enumerate() {
        let accepted = q.p_real >= cfg.threshold;
        if accepted {
            let pixels: Vec<u8> = best_images[i].iter().map(|&v| quantize_u8(v)).collect();
            write_pgm(&gdir.join(format!("{i:05}.img.pgm")), size, size, &pixels)?;
        }
        entries.push(GeneratedEntry { index: i, patient: s.patient.clone(), slice: s.slice, p_real: q.p_real, accepted });
    }
    let index = GeneratedIndex { model_id: best.model_id.clone(), epochs: best.epochs, threshold: cfg.threshold, images: entries };
    write_json(&gdir.join("index.json"), &index)?;

    let rows = subset.train.len().min(MONTAGE_ROWS);
    let targets: Vec<&[f64]> = real[..rows].to_vec();
    let outputs: Vec<&[f64]> = best_images[..rows].iter().map(Vec::as_slice).collect();
    emit_montage(&masks[..rows], &targets, &outputs, &dir.join("montage.ppm"))?;

    write_text(&dir.join("quality.csv"), &QualityReport::to_csv(&reports))?;
    write_json(&dir.join("quality.json"), &reports)
}

fn load_scores(dir: &Path, subset: &Dataset) -> Result<(Vec<QualityReport>, Vec<Sample>)> {
    let reports: Vec<QualityReport> = read_json(&dir.join("quality.json"))?;
    let gdir = dir.join("generated");
    let index: GeneratedIndex = read_json(&gdir.join("index.json"))?;
    let mut samples = Vec::new();
    for e in index.images.iter().filter(|e| e.accepted) {
        let src = subset.train.get(e.index).filter(|s| s.patient == e.patient && s.slice == e.slice).ok_or_else(|| {
            Error::format(gdir.join("index.json"), format!("entry {} does not match the subset", e.index))
        })?;
        let path = gdir.join(format!("{:05}.img.pgm", e.index));
        let (w, h, pixels) = read_pgm(&path)?;
        if w != subset.image_size || h != subset.image_size {
            return Err(Error::format(&path, format!("expected {0}x{0}, found {w}x{h}", subset.image_size)));
        }
        samples.push(Sample {
            patient: format!("gan-{}", e.patient),
            slice: e.slice,
            image: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            mask: src.mask.clone(),
        });
    }
    Ok((reports, samples))
}
