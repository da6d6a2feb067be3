//! The four networks of the pipeline, built from tape operations.
//!
//! A [`Network`] owns its parameters and batch-norm running statistics as
//! plain tensors. A forward pass binds the parameters onto a [`Tape`] as
//! leaves, so the same network can be evaluated with or without gradients.

mod arch;
mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};

use indexmap::IndexMap;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Foreground lesion classes plus background.
pub const NUM_CLASSES: usize = 6;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.9;
pub const GENERATOR_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    Segmenter,
    Classifier,
}

impl NetworkKind {
    pub fn code(self) -> u8 {
        match self {
            NetworkKind::Generator => 0,
            NetworkKind::Discriminator => 1,
            NetworkKind::Segmenter => 2,
            NetworkKind::Classifier => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => NetworkKind::Generator,
            1 => NetworkKind::Discriminator,
            2 => NetworkKind::Segmenter,
            3 => NetworkKind::Classifier,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub image_size: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl NetworkSpec {
    /// One-hot mask in, one image channel out.
    pub fn generator(image_size: usize, base_filters: usize) -> Self {
        Self { kind: NetworkKind::Generator, image_size, base_filters, in_channels: NUM_CLASSES, out_channels: 1 }
    }

    /// Mask one-hot plus the real or generated image in, one logit per patch out.
    pub fn discriminator(image_size: usize, base_filters: usize) -> Self {
        Self { kind: NetworkKind::Discriminator, image_size, base_filters, in_channels: NUM_CLASSES + 1, out_channels: 1 }
    }

    pub fn segmenter(image_size: usize, base_filters: usize) -> Self {
        Self { kind: NetworkKind::Segmenter, image_size, base_filters, in_channels: 1, out_channels: NUM_CLASSES }
    }

    pub fn classifier(image_size: usize, base_filters: usize) -> Self {
        Self { kind: NetworkKind::Classifier, image_size, base_filters, in_channels: 1, out_channels: 1 }
    }

    /// Number of stride-2 stages the architecture applies.
    pub fn depth(&self) -> usize {
        let log2 = self.image_size.trailing_zeros() as usize;
        match self.kind {
            NetworkKind::Generator => log2.saturating_sub(1),
            NetworkKind::Discriminator => 3,
            NetworkKind::Segmenter => 3,
            NetworkKind::Classifier => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() {
            return Err(Error::InvalidSpec(format!("image size {} is not a power of two", self.image_size)));
        }
        if self.base_filters == 0 {
            return Err(Error::InvalidSpec("base_filters must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be positive".into()));
        }
        let min_size = match self.kind {
            NetworkKind::Generator => 4,
            // three stride-2 stages then two stride-1 k4 convs need 4 -> 3 -> 2
            NetworkKind::Discriminator => 32,
            NetworkKind::Segmenter => 8,
            NetworkKind::Classifier => 16,
        };
        if self.image_size < min_size {
            return Err(Error::InvalidSpec(format!(
                "{:?} needs image size at least {min_size}, got {}",
                self.kind, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running averages are reported back.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Per-call forward settings and outputs.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    /// Dropout source; the generator always draws from it.
    pub rng: &'r mut Rng,
    /// Replace the encoder skip at this level with zeros (generator probe).
    pub zero_skip: Option<usize>,
    /// Batch statistics gathered in train mode, keyed by norm-layer name.
    pub stats: Vec<(String, BatchStats)>,
}

impl<'r> ForwardCtx<'r> {
    pub fn new(mode: Mode, rng: &'r mut Rng) -> Self {
        Self { mode, rng, zero_skip: None, stats: Vec::new() }
    }
}

/// Parameters of one network bound to a tape.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: IndexMap<String, Tensor>,
    /// Batch-norm running mean/variance, named `<layer>.mean` / `<layer>.var`.
    pub running: IndexMap<String, Tensor>,
}

impl Network {
    /// Builds and initializes a network: conv weights from N(0, 0.02²),
    /// norm gains 1, biases and shifts 0.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut net = Network { spec, params: IndexMap::new(), running: IndexMap::new() };
        arch::init(&mut net, &mut rng);
        Ok(net)
    }

    pub fn kind(&self) -> NetworkKind {
        self.spec.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self.params.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad))).collect();
        Bound { vars }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels || shape[2] != self.spec.image_size || shape[3] != self.spec.image_size {
            return Err(Error::InvalidInput(format!(
                "{:?} expects [N, {}, {}, {}], got {shape:?}",
                self.spec.kind, self.spec.in_channels, self.spec.image_size, self.spec.image_size
            )));
        }
        arch::forward(self, tape, bound, input, ctx)
    }

    /// Gradient-free evaluation on a fresh tape.
    pub fn infer(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let mut ctx = ForwardCtx::new(mode, rng);
        let y = self.forward(&mut tape, &bound, x, &mut ctx)?;
        Ok(tape.value(y).clone())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (layer, s) in stats {
            for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
                if let Some(r) = self.running.get_mut(&format!("{layer}.{suffix}")) {
                    for (rv, bv) in r.data_mut().iter_mut().zip(batch.iter()) {
                        *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * bv;
                    }
                }
            }
        }
    }

    /// Rounds all parameters and statistics to f32, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        self.params.values_mut().chain(self.running.values_mut()).for_each(Tensor::quantize_f32);
    }
}

pub fn build_generator(spec: NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::Generator)?;
    Network::new(spec, seed)
}

pub fn build_discriminator(spec: NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::Discriminator)?;
    Network::new(spec, seed)
}

pub fn build_segmenter(spec: NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::Segmenter)?;
    if spec.out_channels != NUM_CLASSES {
        return Err(Error::InvalidSpec(format!("segmenter needs {NUM_CLASSES} output classes")));
    }
    Network::new(spec, seed)
}

pub fn build_classifier(spec: NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::Classifier)?;
    if spec.out_channels != 1 {
        return Err(Error::InvalidSpec("classifier emits a single logit".into()));
    }
    Network::new(spec, seed)
}

fn expect_kind(spec: NetworkSpec, kind: NetworkKind) -> Result<()> {
    if spec.kind == kind {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("expected {kind:?} spec, got {:?}", spec.kind)))
    }
}

/// One-hot encodes class-index masks (`[N, H, W]` flattened) into `[N, 6, H, W]`.
pub fn one_hot(masks: &[u8], batch: usize, size: usize) -> Tensor {
    let plane = size * size;
    assert_eq!(masks.len(), batch * plane);
    let mut data = vec![0.0; batch * NUM_CLASSES * plane];
    for (i, &m) in masks.iter().enumerate() {
        let (s, p) = (i / plane, i % plane);
        data[(s * NUM_CLASSES + m as usize) * plane + p] = 1.0;
    }
    Tensor::from_parts(vec![batch, NUM_CLASSES, size, size], data)
}

/// `[0, 1]` intensities to the generator's `[-1, 1]` range.
pub fn to_signed(x: f64) -> f64 {
    2.0 * x - 1.0
}

/// Generator output in `[-1, 1]` back to `[0, 1]`.
pub fn to_unit(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Per-pixel argmax over the class axis of `[N, C, H, W]` logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * plane + p] > d[(b * c + best) * plane + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Logistic function, split by sign so large magnitudes stay finite.
pub fn sigmoid_prob(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
