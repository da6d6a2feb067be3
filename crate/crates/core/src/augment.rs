//! Traditional augmentation: one affine map per sample drives both image
//! (bilinear) and mask (nearest neighbour), then optional blur and
//! contrast on the image only.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive, Rng};

pub const MAX_ROTATION_DEG: f64 = 25.0;
pub const MAX_RESCALE_PCT: f64 = 15.0;
pub const MAX_SHEAR_PX: f64 = 10.0;
pub const BLUR_SIGMA: f64 = 1.0;
pub const BLUR_RADIUS: usize = 2;
pub const MAX_CONTRAST_GAIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub rotation_deg: f64,
    pub rescale_pct: f64,
    pub shear_px: f64,
    pub blur_prob: f64,
    pub contrast_prob: f64,
    pub max_contrast_gain: f64,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn new(seed: u64) -> Self {
        AugmentPolicy {
            rotation_deg: MAX_ROTATION_DEG,
            rescale_pct: MAX_RESCALE_PCT,
            shear_px: MAX_SHEAR_PX,
            blur_prob: 0.5,
            contrast_prob: 0.5,
            max_contrast_gain: MAX_CONTRAST_GAIN,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bounded = |v: f64, hi: f64| (0.0..=hi).contains(&v);
        if !(bounded(self.rotation_deg, MAX_ROTATION_DEG)
            && bounded(self.rescale_pct, MAX_RESCALE_PCT)
            && bounded(self.shear_px, MAX_SHEAR_PX)
            && bounded(self.max_contrast_gain, MAX_CONTRAST_GAIN))
        {
            return Err(Error::InvalidInput("augmentation magnitudes exceed the allowed ranges".into()));
        }
        if !(bounded(self.blur_prob, 1.0) && bounded(self.contrast_prob, 1.0)) {
            return Err(Error::InvalidInput("augmentation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws one sample's levels.
    pub fn draw(&self, rng: &mut Rng) -> Levels {
        let sym = |rng: &mut Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let affine = AffineParams {
            rotation_deg: sym(rng, self.rotation_deg),
            rescale_pct: sym(rng, self.rescale_pct),
            shear_px: sym(rng, self.shear_px),
        };
        let blur = rng.random_bool(self.blur_prob);
        let contrast = rng.random_bool(self.contrast_prob);
        let gain = if contrast && self.max_contrast_gain > 0.0 { rng.random_range(0.0..=self.max_contrast_gain) } else { 0.0 };
        Levels { affine, blur, gain }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub rescale_pct: f64,
    /// Horizontal displacement of the top and bottom rows, in pixels.
    pub shear_px: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { rotation_deg: 0.0, rescale_pct: 0.0, shear_px: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if self.rotation_deg.abs() > MAX_ROTATION_DEG || self.rescale_pct.abs() > MAX_RESCALE_PCT || self.shear_px.abs() > MAX_SHEAR_PX {
            return Err(Error::InvalidInput(format!("affine parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Levels {
    pub affine: AffineParams,
    pub blur: bool,
    pub gain: f64,
}

/// Composite map `rotate * scale * shear` about the image centre, stored
/// inverted so each output pixel looks up its source location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    inv: [[f64; 2]; 2],
    center: f64,
    size: usize,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl Affine {
    /// No range checks, so tests can use angles outside the policy.
    pub fn new(p: AffineParams, size: usize) -> Self {
        let (s, c) = p.rotation_deg.to_radians().sin_cos();
        let scale = 1.0 + p.rescale_pct / 100.0;
        let k = p.shear_px / (size as f64 / 2.0);
        // Forward map on (x, y): R * (scale I) * [[1, k], [0, 1]].
        let fwd = [[scale * c, scale * (c * k - s)], [scale * s, scale * (s * k + c)]];
        let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
        let inv = [[fwd[1][1] / det, -fwd[0][1] / det], [-fwd[1][0] / det, fwd[0][0] / det]];
        Affine { inv, center: (size as f64 - 1.0) / 2.0, size }
    }

    /// Source `(row, col)` of output pixel `(i, j)`.
    pub fn source(&self, i: usize, j: usize) -> (f64, f64) {
        let (x, y) = (j as f64 - self.center, i as f64 - self.center);
        let sx = self.inv[0][0] * x + self.inv[0][1] * y;
        let sy = self.inv[1][0] * x + self.inv[1][1] * y;
        (snap(sy + self.center), snap(sx + self.center))
    }

    pub fn apply_image(&self, image: &[f64]) -> Vec<f64> {
        let n = self.size;
        let px = |r: isize, c: isize| {
            if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
                0.0
            } else {
                image[r as usize * n + c as usize]
            }
        };
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (y, x) = self.source(i, j);
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                let (r, c) = (y0 as isize, x0 as isize);
                let top = (1.0 - fx) * px(r, c) + fx * px(r, c + 1);
                let bottom = (1.0 - fx) * px(r + 1, c) + fx * px(r + 1, c + 1);
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &[u8]) -> Vec<u8> {
        let n = self.size as isize;
        let mut out = Vec::with_capacity(mask.len());
        for i in 0..self.size {
            for j in 0..self.size {
                let (y, x) = self.source(i, j);
                let (r, c) = (y.round() as isize, x.round() as isize);
                out.push(if r < 0 || c < 0 || r >= n || c >= n { 0 } else { mask[(r * n + c) as usize] });
            }
        }
        out
    }
}

fn square_side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len || n == 0 {
        return Err(Error::InvalidInput(format!("{len} pixels is not a square image")));
    }
    Ok(n)
}

pub fn affine_pair(image: &[f64], mask: &[u8], p: AffineParams) -> Result<(Vec<f64>, Vec<u8>)> {
    if image.len() != mask.len() {
        return Err(Error::InvalidInput(format!("image has {} pixels, mask {}", image.len(), mask.len())));
    }
    p.validate()?;
    let a = Affine::new(p, square_side(image.len())?);
    Ok((a.apply_image(image), a.apply_mask(mask)))
}

/// Normalized 1-D Gaussian taps, sigma 1, radius 2.
pub fn blur_kernel() -> [f64; 2 * BLUR_RADIUS + 1] {
    let mut k = std::array::from_fn(|i| {
        let x = i as f64 - BLUR_RADIUS as f64;
        (-x * x / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp()
    });
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable 5x5 Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = blur_kernel();
    let r = BLUR_RADIUS as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; image.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = (-r..=r).map(|d| k[(d + r) as usize] * image[y * width + clamp(x as isize + d, width)]).sum();
        }
    }
    let mut out = vec![0.0; image.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, height) * width + x]).sum();
        }
    }
    out
}

/// Optional blur, then intensities scaled by `1 + gain` and clamped to `[0, 1]`.
pub fn photometric(image: &[f64], blur: bool, gain: f64) -> Result<Vec<f64>> {
    if !(0.0..=MAX_CONTRAST_GAIN).contains(&gain) {
        return Err(Error::InvalidInput(format!("contrast gain {gain} outside [0, {MAX_CONTRAST_GAIN}]")));
    }
    let n = square_side(image.len())?;
    let mut out = if blur { gaussian_blur(image, n, n) } else { image.to_vec() };
    if gain > 0.0 {
        out.iter_mut().for_each(|v| *v = (*v * (1.0 + gain)).clamp(0.0, 1.0));
    }
    Ok(out)
}

pub fn augment_sample(sample: &Sample, levels: &Levels) -> Result<Sample> {
    let (image, mask) = affine_pair(&sample.image, &sample.mask, levels.affine)?;
    let image = photometric(&image, levels.blur, levels.gain)?;
    Ok(Sample { patient: sample.patient.clone(), slice: sample.slice, image, mask })
}

/// One transformed copy per sample; sample `i` draws from its own stream
/// so the result does not depend on scheduling.
pub fn augment_dataset(samples: &[Sample], policy: &AugmentPolicy) -> Result<Vec<Sample>> {
    policy.validate()?;
    Exec::default()
        .map(samples.len(), |i| {
            let mut rng = Rng::seed_from_u64(derive(policy.seed, &[i as u64]));
            augment_sample(&samples[i], &policy.draw(&mut rng))
        })
        .into_iter()
        .collect()
}
