//! Layer layouts. Parameter names are `<layer>.w` (conv kernel),
//! `<layer>.bias`, `<layer>.bn.g` / `<layer>.bn.b` (norm gain and shift);
//! running statistics live under `<layer>.bn.mean` / `<layer>.bn.var`.

use super::{Bound, ForwardCtx, Mode, Network, NetworkKind, GENERATOR_DROPOUT, INIT_STD, LEAKY_SLOPE};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{BatchNormMode, Tape, Tensor, Var};

fn conv_weight(net: &mut Network, rng: &mut Rng, name: &str, shape: [usize; 4]) {
    net.params.insert(format!("{name}.w"), Tensor::randn(&shape, INIT_STD, rng));
}

fn bias(net: &mut Network, name: &str, c: usize) {
    net.params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
}

fn norm(net: &mut Network, name: &str, c: usize) {
    net.params.insert(format!("{name}.bn.g"), Tensor::full(&[c], 1.0));
    net.params.insert(format!("{name}.bn.b"), Tensor::zeros(&[c]));
    net.running.insert(format!("{name}.bn.mean"), Tensor::zeros(&[c]));
    net.running.insert(format!("{name}.bn.var"), Tensor::full(&[c], 1.0));
}

/// Generator encoder widths: base * (1, 2, 4, 8, 8, ...).
pub(super) fn generator_filters(base: usize, depth: usize) -> Vec<usize> {
    (0..depth).map(|i| base * (1usize << i.min(3))).collect()
}

pub(super) fn init(net: &mut Network, rng: &mut Rng) {
    let spec = net.spec;
    let b = spec.base_filters;
    match spec.kind {
        NetworkKind::Generator => {
            let f = generator_filters(b, spec.depth());
            let depth = f.len();
            for i in 0..depth {
                let cin = if i == 0 { spec.in_channels } else { f[i - 1] };
                let name = format!("enc{i}");
                conv_weight(net, rng, &name, [f[i], cin, 4, 4]);
                if i == 0 {
                    bias(net, &name, f[i]);
                } else {
                    norm(net, &name, f[i]);
                }
            }
            for j in (0..depth).rev() {
                let cin = if j == depth - 1 { f[j] } else { 2 * f[j] };
                let cout = if j == 0 { spec.out_channels } else { f[j - 1] };
                let name = format!("dec{j}");
                conv_weight(net, rng, &name, [cin, cout, 4, 4]);
                if j == 0 {
                    bias(net, &name, cout);
                } else {
                    norm(net, &name, cout);
                }
            }
        }
        NetworkKind::Discriminator => {
            let widths = [b, 2 * b, 4 * b, 8 * b];
            let mut cin = spec.in_channels;
            for (i, &w) in widths.iter().enumerate() {
                let name = format!("d{i}");
                conv_weight(net, rng, &name, [w, cin, 4, 4]);
                if i == 0 {
                    bias(net, &name, w);
                } else {
                    norm(net, &name, w);
                }
                cin = w;
            }
            conv_weight(net, rng, "d4", [spec.out_channels, cin, 4, 4]);
            bias(net, "d4", spec.out_channels);
        }
        NetworkKind::Segmenter => {
            let c = spec.out_channels;
            conv_weight(net, rng, "stem", [b, spec.in_channels, 3, 3]);
            norm(net, "stem", b);
            let widths = [2 * b, 4 * b, 8 * b];
            let mut cin = b;
            for (i, &w) in widths.iter().enumerate() {
                let name = format!("down{}", i + 1);
                conv_weight(net, rng, &name, [w, cin, 4, 4]);
                norm(net, &name, w);
                cin = w;
            }
            conv_weight(net, rng, "ctx", [8 * b, 8 * b, 3, 3]);
            norm(net, "ctx", 8 * b);
            for (name, w) in [("score8", 8 * b), ("score4", 4 * b), ("score2", 2 * b)] {
                conv_weight(net, rng, name, [c, w, 1, 1]);
                bias(net, name, c);
            }
            for name in ["up8", "up4", "up2"] {
                conv_weight(net, rng, name, [c, c, 4, 4]);
            }
            bias(net, "up2", c);
        }
        NetworkKind::Classifier => {
            let widths = [b, 2 * b, 4 * b, 8 * b];
            let mut cin = spec.in_channels;
            for (i, &w) in widths.iter().enumerate() {
                let name = format!("c{i}");
                conv_weight(net, rng, &name, [w, cin, 4, 4]);
                if i == 0 {
                    bias(net, &name, w);
                } else {
                    norm(net, &name, w);
                }
                cin = w;
            }
            conv_weight(net, rng, "fc", [spec.out_channels, cin, 1, 1]);
            bias(net, "fc", spec.out_channels);
        }
    }
}

struct Ops<'a, 'c, 'r> {
    net: &'a Network,
    tape: &'a mut Tape,
    bound: &'a Bound,
    ctx: &'c mut ForwardCtx<'r>,
}

impl Ops<'_, '_, '_> {
    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bound.get(&format!("{name}.w"));
        Ok(self.tape.conv2d(x, w, stride, pad)?)
    }

    fn deconv(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.bound.get(&format!("{name}.w"));
        Ok(self.tape.conv2d_transpose(x, w, 2, 1)?)
    }

    fn bias(&mut self, x: Var, name: &str) -> Result<Var> {
        let b = self.bound.get(&format!("{name}.bias"));
        Ok(self.tape.add_bias(x, b)?)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let layer = format!("{name}.bn");
        let g = self.bound.get(&format!("{layer}.g"));
        let b = self.bound.get(&format!("{layer}.b"));
        match self.ctx.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, g, b, BatchNormMode::Train)?;
                if let Some(s) = stats {
                    self.ctx.stats.push((layer, s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.net.running[&format!("{layer}.mean")].data();
                let var = self.net.running[&format!("{layer}.var")].data();
                let (y, _) = self.tape.batch_norm(x, g, b, BatchNormMode::Eval { mean, var })?;
                Ok(y)
            }
        }
    }

    fn lrelu(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.leaky_relu(x, LEAKY_SLOPE)?)
    }

    fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.relu(x)?)
    }
}

pub(super) fn forward(net: &Network, tape: &mut Tape, bound: &Bound, input: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    let mut ops = Ops { net, tape, bound, ctx };
    match net.spec.kind {
        NetworkKind::Generator => generator(&mut ops, input),
        NetworkKind::Discriminator => discriminator(&mut ops, input),
        NetworkKind::Segmenter => segmenter(&mut ops, input),
        NetworkKind::Classifier => classifier(&mut ops, input),
    }
}

/// U-Net: stride-2 encoder, mirrored transposed-conv decoder, encoder
/// features concatenated into the decoder at each resolution.
fn generator(ops: &mut Ops<'_, '_, '_>, input: Var) -> Result<Var> {
    let depth = ops.net.spec.depth();
    let mut skips = Vec::with_capacity(depth);
    let mut h = input;
    for i in 0..depth {
        let name = format!("enc{i}");
        if i > 0 {
            h = ops.lrelu(h)?;
        }
        h = ops.conv(h, &name, 2, 1)?;
        h = if i == 0 { ops.bias(h, &name)? } else { ops.norm(h, &name)? };
        skips.push(h);
    }
    let mut d = skips[depth - 1];
    for j in (0..depth).rev() {
        let name = format!("dec{j}");
        if j < depth - 1 {
            let skip = if ops.ctx.zero_skip == Some(j) { ops.tape.scale(skips[j], 0.0)? } else { skips[j] };
            d = ops.tape.concat_channels(skip, d)?;
        }
        d = ops.relu(d)?;
        d = ops.deconv(d, &name)?;
        if j == 0 {
            d = ops.bias(d, &name)?;
            return Ok(ops.tape.tanh(d)?);
        }
        d = ops.norm(d, &name)?;
        if depth - 1 - j < 3 {
            d = ops.tape.dropout(d, GENERATOR_DROPOUT, ops.ctx.rng)?;
        }
    }
    unreachable!("generator depth is at least one")
}

/// PatchGAN: k4 convs with strides 2, 2, 2, 1, 1; one logit per patch.
fn discriminator(ops: &mut Ops<'_, '_, '_>, input: Var) -> Result<Var> {
    let mut h = input;
    for (i, stride) in [2, 2, 2, 1].into_iter().enumerate() {
        let name = format!("d{i}");
        h = ops.conv(h, &name, stride, 1)?;
        h = if i == 0 { ops.bias(h, &name)? } else { ops.norm(h, &name)? };
        h = ops.lrelu(h)?;
    }
    let h = ops.conv(h, "d4", 1, 1)?;
    ops.bias(h, "d4")
}

/// FCN-8s style: encoder to 1/8 resolution, class scores read out at 1/8,
/// 1/4 and 1/2, fused coarse-to-fine by learned 2x upsampling and summation.
fn segmenter(ops: &mut Ops<'_, '_, '_>, input: Var) -> Result<Var> {
    let mut h = ops.conv(input, "stem", 1, 1)?;
    h = ops.norm(h, "stem")?;
    h = ops.relu(h)?;
    let mut feats = Vec::with_capacity(3);
    for i in 1..=3 {
        let name = format!("down{i}");
        h = ops.conv(h, &name, 2, 1)?;
        h = ops.norm(h, &name)?;
        h = ops.relu(h)?;
        feats.push(h);
    }
    h = ops.conv(h, "ctx", 1, 1)?;
    h = ops.norm(h, "ctx")?;
    let h8 = ops.relu(h)?;

    let s8 = ops.conv(h8, "score8", 1, 0)?;
    let s8 = ops.bias(s8, "score8")?;
    let up = ops.deconv(s8, "up8")?;
    let s4 = ops.conv(feats[1], "score4", 1, 0)?;
    let s4 = ops.bias(s4, "score4")?;
    let fused = ops.tape.add(up, s4)?;
    let up = ops.deconv(fused, "up4")?;
    let s2 = ops.conv(feats[0], "score2", 1, 0)?;
    let s2 = ops.bias(s2, "score2")?;
    let fused = ops.tape.add(up, s2)?;
    let out = ops.deconv(fused, "up2")?;
    ops.bias(out, "up2")
}

/// Four stride-2 blocks, global average pooling, linear readout to one logit.
fn classifier(ops: &mut Ops<'_, '_, '_>, input: Var) -> Result<Var> {
    let mut h = input;
    for i in 0..4 {
        let name = format!("c{i}");
        h = ops.conv(h, &name, 2, 1)?;
        h = if i == 0 { ops.bias(h, &name)? } else { ops.norm(h, &name)? };
        h = ops.lrelu(h)?;
    }
    let pooled = ops.tape.global_avg_pool(h)?;
    let logit = ops.conv(pooled, "fc", 1, 0)?;
    let logit = ops.bias(logit, "fc")?;
    let n = ops.tape.shape(logit)[0];
    Ok(ops.tape.reshape(logit, &[n, 1])?)
}
