//! Experiment configuration, the subset/augment/evaluate pipeline, reports
//! and montages.

mod montage;
mod pipeline;
mod report;

pub use montage::{decode_color, emit_montage, montage_pixels, PALETTE};
pub use pipeline::{
    evaluate_segmenter, generator_path, run_pipeline, score_generators, stage_done, stage_seed, train_generators,
    train_reference, training_sets, PipelineOutcome, ScoredModels, TrainingSets, STAGE_DIR,
};
pub use report::{
    median, read_report, summarize, write_reports, write_summary, ReportRow, Summary, SummaryRow, REPORT_HEADER, SUMMARY_HEADER,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{DEFAULT_BATCH, DEFAULT_LAMBDA_L1, EPOCH_GRID};

pub const DEFAULT_PERCENTS: [f64; 3] = [2.5, 10.0, 25.0];
/// Classifier acceptance threshold used when selecting generated images.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    None,
    Gan,
    Traditional,
    Both,
}

impl AugMode {
    pub const ALL: [AugMode; 4] = [AugMode::None, AugMode::Gan, AugMode::Traditional, AugMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Gan => "gan",
            AugMode::Traditional => "traditional",
            AugMode::Both => "both",
        }
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation mode `{s}`")))
    }
}

/// Flat key/value experiment settings; every key is optional except
/// `dataset` and `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub percents: Vec<f64>,
    pub epoch_grid: Vec<usize>,
    pub seg_epochs: usize,
    pub reference_epochs: usize,
    pub classifier_epochs: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<AugMode>,
    pub threshold: f64,
    pub gen_base: usize,
    pub disc_base: usize,
    pub seg_base: usize,
    pub clf_base: usize,
    pub gan_batch: usize,
    pub lambda_l1: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::new(),
            out_dir: PathBuf::new(),
            percents: DEFAULT_PERCENTS.to_vec(),
            epoch_grid: EPOCH_GRID.to_vec(),
            seg_epochs: 30,
            reference_epochs: 30,
            classifier_epochs: 10,
            seeds: vec![1],
            modes: AugMode::ALL.to_vec(),
            threshold: DEFAULT_THRESHOLD,
            gen_base: 16,
            disc_base: 16,
            seg_base: 16,
            clf_base: 16,
            gan_batch: DEFAULT_BATCH,
            lambda_l1: DEFAULT_LAMBDA_L1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses without validation, for tools that only read a few keys.
    pub fn load_partial(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dataset.as_os_str().is_empty() || self.out_dir.as_os_str().is_empty() {
            return fail("`dataset` and `out_dir` are required".into());
        }
        if self.percents.is_empty() || self.percents.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            return fail(format!("percents must be non-empty and in (0, 100], got {:?}", self.percents));
        }
        if self.epoch_grid.is_empty() || self.epoch_grid.contains(&0) {
            return fail(format!("epoch_grid must be non-empty and positive, got {:?}", self.epoch_grid));
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.modes.is_empty() {
            return fail("at least one augmentation mode is required".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        let counts = [self.seg_epochs, self.reference_epochs, self.classifier_epochs, self.gan_batch];
        let widths = [self.gen_base, self.disc_base, self.seg_base, self.clf_base];
        if counts.contains(&0) || widths.contains(&0) {
            return fail("epoch counts, batch size and network widths must be at least 1".into());
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return fail(format!("lambda_l1 must be finite and non-negative, got {}", self.lambda_l1));
        }
        Ok(())
    }

    /// Grid sorted ascending without duplicates.
    pub fn grid(&self) -> Vec<usize> {
        let mut g = self.epoch_grid.clone();
        g.sort_unstable();
        g.dedup();
        g
    }
}

/// Directory-safe rendering of a percent (`2.5` -> `p2.5`).
pub fn percent_label(p: f64) -> String {
    format!("p{p}")
}
