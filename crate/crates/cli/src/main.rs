use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use hemogan::augment::{augment_dataset, AugmentPolicy};
use hemogan::data::{quantize_u8, read_dataset, write_dataset, Dataset, Sample};
use hemogan::harness::{
    evaluate_segmenter, generator_path, read_report, run_pipeline, score_generators, stage_seed, summarize,
    train_generators, train_reference, training_sets, write_summary, AugMode, ExperimentConfig, ReportRow,
};
use hemogan::metrics::{classifier_probs, rank_models, QualityReport};
use hemogan::nn::{build_segmenter, load_checkpoint, save_checkpoint, NetworkSpec};
use hemogan::phantom::{generate_dataset, subset_by_patients};
use hemogan::rng::seeded;
use hemogan::train::{generate, train_segmenter, TrainConfig};
use hemogan::{Error, Result};

#[derive(Parser)]
#[command(name = "hemogan", version, about = "Lesion-conditional GAN augmentation on synthetic CT phantoms")]
struct Cli {
    /// Experiment config (flat TOML); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; replaces the config's `seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root written by `phantom-gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Percent of training patients to use.
    #[arg(long, default_value_t = 100.0)]
    percent: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic phantom dataset.
    PhantomGen {
        #[arg(long)]
        patients: usize,
        /// Test patients; defaults to 30% of `--patients`, at least 1.
        #[arg(long)]
        test_patients: Option<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train and evaluate one segmenter.
    TrainSeg {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        base: Option<usize>,
        #[arg(long, default_value = "none", value_parser = parse_mode)]
        mode: AugMode,
        /// Dataset written by `generate`, required for `gan` and `both`.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Record test DSC after every epoch.
        #[arg(long)]
        validate: bool,
    },
    /// Train an LcGAN, saving a generator at every grid epoch.
    TrainGan {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
        #[arg(long)]
        gen_base: Option<usize>,
        #[arg(long)]
        disc_base: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lambda_l1: Option<f64>,
    },
    /// Score generator snapshots with FCN score, blur metrics and a
    /// real/fake classifier.
    ScoreModels {
        #[command(flatten)]
        data: DataArgs,
        /// Directory holding `gen-e<E>.ckpt` files; defaults to `--out`.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Full-data segmenter; trained and saved when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate one image per subset mask.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep only images this classifier accepts.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write one traditionally augmented copy per subset slice.
    Augment {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the full subset, augment, train, evaluate pipeline.
    Experiment {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        percents: Option<Vec<f64>>,
    },
    /// Rebuild the summary tables from an experiment's `report.csv`.
    Report,
}

fn parse_mode(s: &str) -> std::result::Result<AugMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => ExperimentConfig::load_partial(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        if let Some(out) = &cli.out {
            cfg.out_dir = out.clone();
        }
        let seed = cfg.seeds.first().copied().unwrap_or(0);
        Ok(Ctx { cfg, seed })
    }

    fn out(&self) -> Result<&Path> {
        if self.cfg.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("no output directory, pass --out".into()));
        }
        let out = self.cfg.out_dir.as_path();
        std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
        Ok(out)
    }

    fn dataset(&mut self, data: &Option<PathBuf>) -> Result<Dataset> {
        if let Some(d) = data {
            self.cfg.dataset = d.clone();
        }
        if self.cfg.dataset.as_os_str().is_empty() {
            return Err(Error::Config("no dataset, pass --data".into()));
        }
        read_dataset(&self.cfg.dataset)
    }

    fn subset(&mut self, args: &DataArgs) -> Result<(Dataset, Dataset)> {
        let ds = self.dataset(&args.data)?;
        let sub = subset_by_patients(&ds, args.percent, self.seed)?;
        log::info!("{}% subset: {} of {} training slices", args.percent, sub.train.len(), ds.train.len());
        Ok((ds, sub))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Dataset of extra training slices only, under renamed patients.
fn extra_dataset(like: &Dataset, prefix: &str, samples: Vec<Sample>) -> Dataset {
    let train = samples.into_iter().map(|s| Sample { patient: format!("{prefix}-{}", s.patient), ..s }).collect();
    Dataset { image_size: like.image_size, seed: like.seed, train, test: Vec::new(), patient_seeds: Default::default() }
}

/// `gen-e<E>.ckpt` files in `dir`, by epoch.
fn snapshots(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut epochs: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("gen-e")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .collect();
    epochs.sort_unstable();
    if epochs.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no gen-e<E>.ckpt snapshots", dir.display())));
    }
    Ok(epochs)
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::PhantomGen { patients, test_patients, size } => {
            let test = test_patients.unwrap_or((patients * 3 / 10).max(1));
            let ds = generate_dataset(patients, test, size, ctx.seed)?;
            write_dataset(&ds, ctx.out()?)?;
            println!("{} train / {} test slices", ds.train.len(), ds.test.len());
        }
        Command::TrainSeg { data, epochs, base, mode, generated, validate } => {
            let (ds, sub) = ctx.subset(&data)?;
            let (seed, percent) = (ctx.seed, data.percent);
            let extra = match (&generated, mode) {
                (Some(dir), _) => read_dataset(dir)?.train,
                (None, AugMode::Gan | AugMode::Both) => {
                    return Err(Error::Config(format!("mode `{mode}` needs --generated")));
                }
                (None, _) => Vec::new(),
            };
            let sets = training_sets(&sub.train, extra, &AugmentPolicy::new(stage_seed(seed, "traditional", percent)))?;
            let added = sets.added(mode);
            let sseed = stage_seed(seed, "segmenter", percent);
            let seg = build_segmenter(NetworkSpec::segmenter(ds.image_size, base.unwrap_or(ctx.cfg.seg_base)), sseed)?;
            let tc = TrainConfig::segmenter(epochs.unwrap_or(ctx.cfg.seg_epochs), sseed);
            let val = validate.then_some(ds.test.as_slice());
            let (seg, history) = train_segmenter(seg, &sets.original, &added, val, &tc)?;
            let row = evaluate_segmenter(&seg, &ds.test, percent, mode, seed, sets.original.len() + added.len())?;
            let out = ctx.out()?;
            save_checkpoint(&seg, out.join("segmenter.ckpt"))?;
            write(&out.join("history.csv"), &history.to_csv())?;
            write(&out.join("report.csv"), &ReportRow::to_csv(std::slice::from_ref(&row)))?;
            println!("mean DSC {:.4} on {} test slices", row.mean_dsc, ds.test.len());
        }
        Command::TrainGan { data, epochs, gen_base, disc_base, batch, lambda_l1 } => {
            let (_, sub) = ctx.subset(&data)?;
            let cfg = &mut ctx.cfg;
            cfg.epoch_grid = epochs.unwrap_or_else(|| cfg.epoch_grid.clone());
            cfg.gen_base = gen_base.unwrap_or(cfg.gen_base);
            cfg.disc_base = disc_base.unwrap_or(cfg.disc_base);
            cfg.gan_batch = batch.unwrap_or(cfg.gan_batch);
            cfg.lambda_l1 = lambda_l1.unwrap_or(cfg.lambda_l1);
            if cfg.epoch_grid.is_empty() || cfg.epoch_grid.contains(&0) {
                return Err(Error::Config(format!("epochs must be positive, got {:?}", cfg.epoch_grid)));
            }
            let history = train_generators(&sub.train, &ctx.cfg, ctx.seed, data.percent, ctx.out()?)?;
            if let Some(last) = history.epochs.last() {
                println!("epoch {}: d_loss {:.4} g_gan {:.4} g_l1 {:.4}", last.epoch, last.d_loss, last.g_gan_loss, last.g_l1_loss);
            }
        }
        Command::ScoreModels { data, models, reference, threshold } => {
            let (ds, sub) = ctx.subset(&data)?;
            let out = ctx.out()?.to_path_buf();
            let dir = models.unwrap_or_else(|| out.clone());
            let generators =
                snapshots(&dir)?.into_iter().map(|e| Ok((e, load_checkpoint(generator_path(&dir, e))?))).collect::<Result<Vec<_>>>()?;
            let reference = match reference {
                Some(path) => load_checkpoint(path)?,
                None => {
                    let net = train_reference(&ds, &ctx.cfg, ctx.seed)?;
                    save_checkpoint(&net, out.join("reference.ckpt"))?;
                    net
                }
            };
            ctx.cfg.threshold = threshold.unwrap_or(ctx.cfg.threshold);
            let scored = score_generators(&generators, &sub.train, &reference, &ctx.cfg, ctx.seed, data.percent)?;
            save_checkpoint(&scored.classifier, out.join("classifier.ckpt"))?;
            write(&out.join("quality.csv"), &QualityReport::to_csv(&scored.reports))?;
            for (rank, r) in rank_models(&scored.reports).iter().enumerate() {
                println!("{}. {}", rank + 1, r.csv_row());
            }
        }
        Command::Generate { data, checkpoint, classifier, threshold } => {
            let (ds, sub) = ctx.subset(&data)?;
            let gen = load_checkpoint(&checkpoint)?;
            let masks: Vec<&[u8]> = sub.train.iter().map(|s| s.mask.as_slice()).collect();
            let mut rng = seeded(stage_seed(ctx.seed, "generate", data.percent));
            let images: Vec<Vec<f64>> = generate(&gen, &masks, &mut rng)?
                .into_iter()
                .map(|im| im.into_iter().map(|v| quantize_u8(v) as f64 / 255.0).collect())
                .collect();
            let keep = match classifier {
                Some(path) => {
                    let clf = load_checkpoint(path)?;
                    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
                    let t = threshold.unwrap_or(ctx.cfg.threshold);
                    classifier_probs(&clf, &refs)?.into_iter().map(|p| p >= t).collect()
                }
                None => vec![true; images.len()],
            };
            let samples: Vec<Sample> = sub
                .train
                .iter()
                .zip(images)
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|((s, image), _)| Sample { image, ..s.clone() })
                .collect();
            println!("kept {} of {} generated images", samples.len(), keep.len());
            write_dataset(&extra_dataset(&ds, "gan", samples), ctx.out()?)?;
        }
        Command::Augment { data } => {
            let (ds, sub) = ctx.subset(&data)?;
            let policy = AugmentPolicy::new(stage_seed(ctx.seed, "traditional", data.percent));
            let samples = augment_dataset(&sub.train, &policy)?;
            println!("{} augmented slices", samples.len());
            write_dataset(&extra_dataset(&ds, "aug", samples), ctx.out()?)?;
        }
        Command::Experiment { data, percents } => {
            if let Some(d) = data {
                ctx.cfg.dataset = d;
            }
            if let Some(p) = percents {
                ctx.cfg.percents = p;
            }
            let outcome = run_pipeline(&ctx.cfg)?;
            print!("{}", outcome.summary.table1());
        }
        Command::Report => {
            let out = ctx.out()?;
            let rows = read_report(&out.join("report.csv"))?;
            let summary = summarize(&rows);
            write_summary(out, &summary)?;
            print!("{}", summary.table1());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!(": {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
