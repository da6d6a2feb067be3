use rand::SeedableRng;

use super::{epoch_order, locate, mean, param_grads, Adam, TrainConfig};
use crate::data::{condition_batch, image_batch, Sample};
use crate::error::{Error, Result};
use crate::nn::{one_hot, to_unit, ForwardCtx, Mode, Network, NetworkKind};
use crate::rng::{derive, seeded, tag, Rng};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const GAN_HISTORY_HEADER: &str = "epoch,d_loss,g_gan_loss,g_l1_loss";
const GEN_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStep {
    pub d_loss: f64,
    pub g_gan_loss: f64,
    pub g_l1_loss: f64,
    /// Largest generator gradient seen by the discriminator update; the
    /// fake is detached there, so this is zero.
    pub gen_grad_in_d_step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_gan_loss: f64,
    pub g_l1_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanHistory {
    pub epochs: Vec<GanEpoch>,
}

impl GanHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{GAN_HISTORY_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.d_loss, e.g_gan_loss, e.g_l1_loss));
        }
        out
    }
}

/// Generator, discriminator and their optimizers. Each step updates the
/// discriminator on detached fakes, then the generator against the
/// freshly updated discriminator, reusing one generator forward pass.
pub struct LcganTrainer {
    pub gen: Network,
    pub disc: Network,
    pub cfg: TrainConfig,
    opt_g: Adam,
    opt_d: Adam,
    noise: Rng,
}

fn d_objective(
    tape: &mut Tape,
    disc: &Network,
    bound: &crate::nn::Bound,
    cond: Var,
    real: Var,
    fake: Var,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let mut rng = seeded(0);
    let mut logits = |tape: &mut Tape, image: Var, stats: &mut Vec<(String, BatchStats)>| -> Result<Var> {
        let input = tape.concat_channels(cond, image)?;
        let mut ctx = ForwardCtx::new(Mode::Train, &mut rng);
        let out = disc.forward(tape, bound, input, &mut ctx)?;
        stats.append(&mut ctx.stats);
        Ok(out)
    };
    let lr = logits(tape, real, stats)?;
    let lf = logits(tape, fake, stats)?;
    let ones = Tensor::full(tape.shape(lr), 1.0);
    let zeros = Tensor::zeros(tape.shape(lf));
    let real_loss = tape.bce_with_logits(lr, &ones)?;
    let fake_loss = tape.bce_with_logits(lf, &zeros)?;
    let total = tape.add(real_loss, fake_loss)?;
    Ok(tape.scale(total, 0.5)?)
}

impl LcganTrainer {
    pub fn new(gen: Network, disc: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (g, d) = (gen.spec, disc.spec);
        if g.kind != NetworkKind::Generator || d.kind != NetworkKind::Discriminator {
            return Err(Error::InvalidSpec("LcGAN needs a generator and a discriminator".into()));
        }
        if g.image_size != d.image_size || d.in_channels != g.in_channels + g.out_channels {
            return Err(Error::InvalidSpec(format!("generator {g:?} and discriminator {d:?} do not fit together")));
        }
        let noise = Rng::seed_from_u64(derive(cfg.seed, &[tag("gan-noise")]));
        Ok(LcganTrainer { gen, disc, opt_g: Adam::new(cfg.adam), opt_d: Adam::new(cfg.adam), cfg, noise })
    }

    pub fn image_size(&self) -> usize {
        self.gen.spec.image_size
    }

    pub fn step(&mut self, batch: &[&Sample]) -> Result<GanStep> {
        let s = self.image_size();
        let real_t = image_batch(batch, s, true);
        let mut tape = Tape::new();
        let bg = self.gen.bind(&mut tape, true);
        let cond = tape.constant(condition_batch(batch, s));
        let real = tape.constant(real_t.clone());
        let mut gctx = ForwardCtx::new(Mode::Train, &mut self.noise);
        let fake = self.gen.forward(&mut tape, &bg, cond, &mut gctx)?;
        let gen_stats = std::mem::take(&mut gctx.stats);

        let fake_d = tape.detach(fake);
        let bd = self.disc.bind(&mut tape, true);
        let mut dstats = Vec::new();
        let d_loss = d_objective(&mut tape, &self.disc, &bd, cond, real, fake_d, &mut dstats)?;
        let grads = tape.backward(d_loss)?;
        let gen_grad_in_d_step = bg
            .iter()
            .filter_map(|(_, v)| grads.get(v))
            .flat_map(|g| g.data().iter().map(|x| x.abs()))
            .fold(0.0, f64::max);
        let gd = param_grads(&bd, &grads)?;
        drop(grads);
        self.opt_d.update(&mut self.disc.params, &gd)?;
        self.disc.update_running_stats(&dstats);

        let bd = self.disc.bind(&mut tape, false);
        let input = tape.concat_channels(cond, fake)?;
        let mut rng = seeded(0);
        let logits = self.disc.forward(&mut tape, &bd, input, &mut ForwardCtx::new(Mode::Train, &mut rng))?;
        let ones = Tensor::full(tape.shape(logits), 1.0);
        let g_gan = tape.bce_with_logits(logits, &ones)?;
        let g_l1 = tape.l1(fake, &real_t)?;
        let weighted = tape.scale(g_l1, self.cfg.lambda_l1)?;
        let g_total = tape.add(g_gan, weighted)?;
        let grads = tape.backward(g_total)?;
        let gg = param_grads(&bg, &grads)?;
        self.opt_g.update(&mut self.gen.params, &gg)?;
        self.gen.update_running_stats(&gen_stats);

        Ok(GanStep {
            d_loss: tape.value(d_loss).item(),
            g_gan_loss: tape.value(g_gan).item(),
            g_l1_loss: tape.value(g_l1).item(),
            gen_grad_in_d_step,
        })
    }

    /// Discriminator loss on explicit tensors (`[-1, 1]` images), no update.
    pub fn discriminator_loss(&self, cond: &Tensor, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bd = self.disc.bind(&mut tape, false);
        let (c, r, f) = (tape.constant(cond.clone()), tape.constant(real.clone()), tape.constant(fake.clone()));
        let loss = d_objective(&mut tape, &self.disc, &bd, c, r, f, &mut Vec::new())?;
        Ok(tape.value(loss).item())
    }

    /// One discriminator update on explicit tensors; returns the loss before it.
    pub fn discriminator_step(&mut self, cond: &Tensor, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bd = self.disc.bind(&mut tape, true);
        let (c, r, f) = (tape.constant(cond.clone()), tape.constant(real.clone()), tape.constant(fake.clone()));
        let mut stats = Vec::new();
        let loss = d_objective(&mut tape, &self.disc, &bd, c, r, f, &mut stats)?;
        let gd = param_grads(&bd, &tape.backward(loss)?)?;
        self.opt_d.update(&mut self.disc.params, &gd)?;
        self.disc.update_running_stats(&stats);
        Ok(tape.value(loss).item())
    }
}

/// Trains for `cfg.epochs` over `samples`. `on_epoch` runs after every
/// epoch with its 1-based number.
pub fn train_lcgan<F>(gen: Network, disc: Network, samples: &[Sample], cfg: &TrainConfig, mut on_epoch: F) -> Result<(LcganTrainer, GanHistory)>
where
    F: FnMut(usize, &LcganTrainer) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::InvalidInput("LcGAN training set is empty".into()));
    }
    let mut trainer = LcganTrainer::new(gen, disc, cfg.clone())?;
    let mut history = GanHistory::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(samples.len(), cfg, "gan-order", epoch);
        let mut steps = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            steps.push(locate(trainer.step(&batch), "train_lcgan", epoch, b)?);
        }
        history.epochs.push(GanEpoch {
            epoch,
            d_loss: mean(&steps.iter().map(|s| s.d_loss).collect::<Vec<_>>()),
            g_gan_loss: mean(&steps.iter().map(|s| s.g_gan_loss).collect::<Vec<_>>()),
            g_l1_loss: mean(&steps.iter().map(|s| s.g_l1_loss).collect::<Vec<_>>()),
        });
        on_epoch(epoch, &trainer)?;
    }
    Ok((trainer, history))
}

/// Synthesizes one `[0, 1]` image per mask. Batch norm uses running
/// statistics; dropout stays on as the noise source.
pub fn generate(gen: &Network, masks: &[&[u8]], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let s = gen.spec.image_size;
    if let Some(bad) = masks.iter().find(|m| m.len() != s * s) {
        return Err(Error::InvalidInput(format!("mask of {} pixels, generator expects {s}x{s}", bad.len())));
    }
    let mut out = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(GEN_BATCH) {
        let flat: Vec<u8> = chunk.iter().flat_map(|m| m.iter().copied()).collect();
        let y = gen.infer(&one_hot(&flat, chunk.len(), s), Mode::Eval, rng)?;
        out.extend(y.data().chunks(s * s).map(|im| im.iter().map(|&v| to_unit(v)).collect()));
    }
    Ok(out)
}
