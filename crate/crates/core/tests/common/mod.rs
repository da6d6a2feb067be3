//! Oracles shared by the integration and acceptance tests. Nothing here
//! calls into the convolution kernels it is used to check.
#![allow(dead_code)]

use hemogan::tensor::{Result, Tape, Tensor, Var};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of a scalar-valued graph with central finite
/// differences for every input; returns the worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf gradient").data().to_vec();
        let mut numeric = vec![0.0; input.len()];
        let mut vals = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[i];
            vals[k].data_mut()[i] = orig + h;
            let fp = eval(&vals);
            vals[k].data_mut()[i] = orig - h;
            let fm = eval(&vals);
            vals[k].data_mut()[i] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Direct summation cross-correlation, `[N,C,H,W]` by `[F,C,k,k]`.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, k) = (ws[0], ws[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for s in 0..n {
        for o in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                let ii = (i * stride + a) as isize - pad as isize;
                                let jj = (j * stride + b) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * c + ch) * h + ii as usize) * wd + jj as usize]
                                    * w.data()[((o * c + ch) * k + a) * k + b];
                            }
                        }
                    }
                    out[((s * f + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, ho, wo], out).unwrap()
}

/// Pixel-count Dice oracle over a binary foreground predicate.
pub fn dice_bruteforce(a: &[u8], b: &[u8], fg: impl Fn(u8) -> bool) -> f64 {
    let mut sa = 0usize;
    let mut sb = 0usize;
    let mut both = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (fg(x), fg(y));
        sa += ia as usize;
        sb += ib as usize;
        both += (ia && ib) as usize;
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (sa + sb) as f64
    }
}

/// One gradient-check configuration result.
pub struct GradCase {
    pub op: &'static str,
    pub config: usize,
    pub rel_err: f64,
}

/// Finite-difference check of every differentiable tape op over
/// `configs` random shapes/values each (fp64, step `h`).
pub fn gradient_suite(configs: usize, h: f64) -> Vec<GradCase> {
    use hemogan::tensor::{BatchNormMode, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let mut cases = Vec::new();
    let ops: &[&str] = &[
        "conv2d",
        "conv2d_transpose",
        "add_bias",
        "batch_norm_train",
        "batch_norm_eval",
        "leaky_relu",
        "relu",
        "tanh",
        "sigmoid",
        "dropout",
        "concat_channels",
        "slice_channels",
        "add",
        "scale",
        "sum",
        "mean",
        "global_avg_pool",
        "reshape",
        "bce_with_logits",
        "l1",
        "softmax_cross_entropy",
        "softmax_cross_entropy_weighted",
    ];
    for (oi, &op) in ops.iter().enumerate() {
        for cfg in 0..configs {
            let mut rng = ChaCha8Rng::seed_from_u64((oi * 1000 + cfg) as u64);
            let n = rng.random_range(1..3);
            let c = rng.random_range(1..4);
            let h_ = rng.random_range(2..6);
            let w_ = rng.random_range(2..6);
            let x = Tensor::randn(&[n, c, h_, w_], 1.0, &mut rng);
            let (inputs, build): (Vec<Tensor>, Build) = match op {
                "conv2d" => {
                    let k = rng.random_range(1..4);
                    let stride = rng.random_range(1..3);
                    let pad = rng.random_range(0..2);
                    let hh = k.max(2) + rng.random_range(0..4);
                    let x = Tensor::randn(&[n, c, hh, hh + 1], 1.0, &mut rng);
                    let f = rng.random_range(1..4);
                    let kern = Tensor::randn(&[f, c, k, k], 1.0, &mut rng);
                    let r = Tensor::randn(&[n, f, (hh + 2 * pad - k) / stride + 1, (hh + 1 + 2 * pad - k) / stride + 1], 1.0, &mut rng);
                    (vec![x, kern], Box::new(move |t, v| {
                        let y = t.conv2d(v[0], v[1], stride, pad)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "conv2d_transpose" => {
                    let k = rng.random_range(2..5);
                    let stride = rng.random_range(1..3);
                    let pad = rng.random_range(0..2);
                    let f = rng.random_range(1..4);
                    let kern = Tensor::randn(&[c, f, k, k], 1.0, &mut rng);
                    let ho = (h_ - 1) * stride + k - 2 * pad;
                    let wo = (w_ - 1) * stride + k - 2 * pad;
                    let r = Tensor::randn(&[n, f, ho, wo], 1.0, &mut rng);
                    (vec![x, kern], Box::new(move |t, v| {
                        let y = t.conv2d_transpose(v[0], v[1], stride, pad)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "add_bias" => {
                    let b = Tensor::randn(&[c], 1.0, &mut rng);
                    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
                    (vec![x, b], Box::new(move |t, v| {
                        let y = t.add_bias(v[0], v[1])?;
                        let y = t.tanh(y)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "batch_norm_train" | "batch_norm_eval" => {
                    let g = Tensor::rand_uniform(&[c], 0.5, 1.5, &mut rng);
                    let b = Tensor::randn(&[c], 1.0, &mut rng);
                    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
                    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
                    let train = op == "batch_norm_train";
                    (vec![x, g, b], Box::new(move |t, v| {
                        let mode = if train { BatchNormMode::Train } else { BatchNormMode::Eval { mean: &mean, var: &var } };
                        let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
                        let y = t.tanh(y)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "leaky_relu" | "relu" | "tanh" | "sigmoid" => {
                    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
                    let name = op;
                    (vec![x], Box::new(move |t, v| {
                        let y = match name {
                            "leaky_relu" => t.leaky_relu(v[0], 0.2)?,
                            "relu" => t.relu(v[0])?,
                            "tanh" => t.tanh(v[0])?,
                            _ => t.sigmoid(v[0])?,
                        };
                        t.weighted_sum(y, &r)
                    }))
                }
                "dropout" => {
                    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
                    let seed = cfg as u64;
                    (vec![x], Box::new(move |t, v| {
                        let mut drng = ChaCha8Rng::seed_from_u64(seed);
                        let y = t.dropout(v[0], 0.3, &mut drng)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "concat_channels" => {
                    let c2 = rng.random_range(1..4);
                    let b = Tensor::randn(&[n, c2, h_, w_], 1.0, &mut rng);
                    let r = Tensor::randn(&[n, c + c2, h_, w_], 1.0, &mut rng);
                    (vec![x, b], Box::new(move |t, v| {
                        let y = t.concat_channels(v[0], v[1])?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "slice_channels" => {
                    let start = rng.random_range(0..c);
                    let len = rng.random_range(1..=c - start);
                    let r = Tensor::randn(&[n, len, h_, w_], 1.0, &mut rng);
                    (vec![x], Box::new(move |t, v| {
                        let y = t.slice_channels(v[0], start, len)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "add" => {
                    let b = Tensor::randn(x.shape(), 1.0, &mut rng);
                    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
                    (vec![x, b], Box::new(move |t, v| {
                        let y = t.add(v[0], v[1])?;
                        let y = t.sigmoid(y)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "scale" => {
                    let s: f64 = rng.random_range(-2.0..2.0);
                    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
                    (vec![x], Box::new(move |t, v| {
                        let y = t.scale(v[0], s)?;
                        let y = t.tanh(y)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "sum" | "mean" => {
                    let name = op;
                    (vec![x], Box::new(move |t, v| {
                        let y = t.tanh(v[0])?;
                        if name == "sum" { t.sum(y) } else { t.mean(y) }
                    }))
                }
                "global_avg_pool" => {
                    let r = Tensor::randn(&[n, c, 1, 1], 1.0, &mut rng);
                    (vec![x], Box::new(move |t, v| {
                        let y = t.global_avg_pool(v[0])?;
                        let y = t.tanh(y)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "reshape" => {
                    let total = n * c * h_ * w_;
                    let r = Tensor::randn(&[total], 1.0, &mut rng);
                    (vec![x], Box::new(move |t, v| {
                        let y = t.reshape(v[0], &[total])?;
                        let y = t.tanh(y)?;
                        t.weighted_sum(y, &r)
                    }))
                }
                "bce_with_logits" => {
                    let target = Tensor::rand_uniform(x.shape(), 0.0, 1.0, &mut rng);
                    (vec![x], Box::new(move |t, v| t.bce_with_logits(v[0], &target)))
                }
                "l1" => {
                    let target = Tensor::randn(x.shape(), 1.0, &mut rng);
                    (vec![x], Box::new(move |t, v| t.l1(v[0], &target)))
                }
                _ => {
                    let classes = rng.random_range(2..5);
                    let logits = Tensor::randn(&[n, classes, h_, w_], 2.0, &mut rng);
                    let target: Vec<usize> = (0..n * h_ * w_).map(|_| rng.random_range(0..classes)).collect();
                    let weights: Option<Vec<f64>> = (op == "softmax_cross_entropy_weighted")
                        .then(|| (0..classes).map(|_| rng.random_range(0.5..3.0)).collect());
                    (vec![logits], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &target, weights.as_deref())))
                }
            };
            cases.push(GradCase { op, config: cfg, rel_err: gradcheck(&inputs, h, build) });
        }
    }
    cases
}

/// Input rows and columns with nonzero gradient for a weighted readout of
/// the discriminator output grid, measured in eval mode so batch
/// statistics do not couple distant pixels. Returns inclusive bounding
/// ranges `(row_lo, row_hi, col_lo, col_hi)` per readout.
pub fn patch_support(
    disc: &hemogan::nn::Network,
    readouts: &[Tensor],
    seed: u64,
) -> Vec<Option<(usize, usize, usize, usize)>> {
    use hemogan::nn::{ForwardCtx, Mode};
    use rand::SeedableRng;

    let s = disc.spec.image_size;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::randn(&[1, disc.spec.in_channels, s, s], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bound = disc.bind(&mut tape, false);
    let x = tape.leaf(input, true);
    let mut ctx = ForwardCtx::new(Mode::Eval, &mut rng);
    let out = disc.forward(&mut tape, &bound, x, &mut ctx).expect("forward");
    readouts
        .iter()
        .map(|r| {
            let loss = tape.weighted_sum(out, r).expect("readout");
            let grads = tape.backward(loss).expect("backward");
            let g = grads.get(x).expect("input gradient").data();
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            for (i, &v) in g.iter().enumerate() {
                if v != 0.0 {
                    let (row, col) = ((i / s) % s, i % s);
                    r0 = r0.min(row);
                    r1 = r1.max(row);
                    c0 = c0.min(col);
                    c1 = c1.max(col);
                }
            }
            (r0 != usize::MAX).then_some((r0, r1, c0, c1))
        })
        .collect()
}

/// Expected support of output index `i`: five k4 convs, pad 1 each,
/// cumulative strides 1, 2, 4, 8, 8.
pub fn patch_span(i: usize, size: usize) -> (usize, usize) {
    let lo = (8 * i as i64 - 23).max(0) as usize;
    let hi = ((8 * i + 46) as i64).min(size as i64 - 1) as usize;
    (lo, hi)
}
