use std::f64::consts::{PI, TAU};

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::{HeadGeometry, Lesion, LesionPlan, PatientSpec};
use crate::data::Sample;
use crate::rng::{derive, Rng};

/// Radial wobble of the SAH ribbon centerline.
pub(super) const SAH_WAVE: f64 = 0.03;

const BACKGROUND: f64 = 0.03;
const SKULL: f64 = 0.92;
const CSF: f64 = 0.2;
const NOISE: f64 = 0.02;

/// A pixel expressed in the head's brain frame.
#[derive(Clone, Copy, Debug)]
pub struct BrainPoint {
    /// Axis-normalized offsets; the inner skull boundary is `u² + v² = 1`.
    pub u: f64,
    pub v: f64,
    pub rho: f64,
    pub theta: f64,
    /// Same radius against the outer skull boundary.
    pub rho_outer: f64,
}

/// Head scale on slice `z` of `n`: largest mid-volume.
pub fn slice_scale(z: usize, n: usize) -> f64 {
    0.86 + 0.14 * (PI * (z as f64 + 0.5) / n as f64).sin()
}

/// Maps unit-square point `(x, y)` into the brain frame of `head` scaled by `scale`.
pub fn brain_frame(head: &HeadGeometry, scale: f64, x: f64, y: f64) -> BrainPoint {
    let (dx, dy) = (x - head.center.0, y - head.center.1);
    let (s, c) = head.angle.sin_cos();
    let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
    let (ax, ay) = (head.semi_axes.0 * scale, head.semi_axes.1 * scale);
    let t = head.skull * scale;
    let (u, v) = (rx / (ax - t), ry / (ay - t));
    BrainPoint { u, v, rho: u.hypot(v), theta: v.atan2(u), rho_outer: (rx / ax).hypot(ry / ay) }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Growth profile of a lesion across its slice range, in `[0.55, 1]`.
fn profile(l: &LesionPlan, z: usize) -> f64 {
    let len = (l.last_slice - l.first_slice + 1) as f64;
    0.55 + 0.45 * (PI * ((z - l.first_slice) as f64 + 0.5) / len).sin()
}

fn covers(l: &LesionPlan, b: &BrainPoint, p: f64) -> bool {
    if b.rho >= 1.0 {
        return false;
    }
    let (ct, st) = (l.theta.cos(), l.theta.sin());
    match l.class {
        Lesion::Iph => {
            let (du, dv) = (b.u - l.rho * ct, b.v - l.rho * st);
            let (sp, cp) = l.phase.sin_cos();
            let (a, c) = (du * cp + dv * sp, -du * sp + dv * cp);
            let r = (a / (l.size * p)).hypot(c / (l.size * p * l.aspect));
            r <= 1.0 + 0.15 * (3.0 * c.atan2(a) + l.phase).sin()
        }
        Lesion::Ivh => {
            let (cu, cv) = (l.rho * ct, l.rho * st);
            let r = 0.7 * l.size * p;
            (0..3).any(|k| {
                let a = l.phase + k as f64 * TAU / 3.0;
                let (lu, lv) = (cu + 0.6 * l.size * p * a.cos(), cv + 0.6 * l.size * p * a.sin());
                (b.u - lu).hypot(b.v - lv) <= r
            })
        }
        Lesion::Sah => {
            let d = wrap(b.theta - l.theta);
            let center = l.rho + SAH_WAVE * (4.0 * b.theta + l.phase).sin();
            d.abs() <= l.aspect * p && (b.rho - center).abs() <= l.size / 2.0
        }
        Lesion::Edh => {
            let w = l.aspect * (0.7 + 0.3 * p);
            let d = wrap(b.theta - l.theta) / w;
            d.abs() <= 1.0 && b.rho >= 1.0 - l.size * p * (1.0 - d * d)
        }
        Lesion::Sdh => {
            let w = l.aspect * (0.7 + 0.3 * p);
            let d = wrap(b.theta - l.theta) / w;
            d.abs() <= 1.0 && b.rho >= 1.0 - l.size * (0.6 + 0.4 * p) * (1.0 - d.powi(4))
        }
    }
}

fn in_ventricle(b: &BrainPoint, sv: f64) -> bool {
    [-0.13, 0.13].iter().any(|&cu| ((b.u - cu) / (0.07 * sv)).hypot((b.v + 0.05) / (0.2 * sv)) <= 1.0)
}

/// Smooth per-patient texture: three low-frequency plane waves drifting with `z`.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut r = Rng::seed_from_u64(seed);
        let mut wave = || (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(0.0..TAU));
        Texture { waves: [wave(), wave(), wave()] }
    }

    fn at(&self, x: f64, y: f64, z: usize) -> f64 {
        self.waves.iter().map(|&(fx, fy, ph)| 0.02 * (TAU * (fx * x + fy * y) + ph + 0.3 * z as f64).sin()).sum()
    }
}

pub(super) fn slice(spec: &PatientSpec, z: usize, size: usize) -> Sample {
    let scale = slice_scale(z, spec.slices);
    let sv = 0.6 + 0.4 * (PI * (z as f64 + 0.5) / spec.slices as f64).sin();
    let texture = Texture::new(derive(spec.seed, &[u64::MAX]));
    let mut noise = Rng::seed_from_u64(derive(spec.seed, &[z as u64]));
    let active: Vec<(&LesionPlan, f64)> = spec
        .lesions
        .iter()
        .filter(|l| (l.first_slice..=l.last_slice).contains(&z))
        .map(|l| (l, profile(l, z)))
        .collect();

    let n = size * size;
    let mut image = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = ((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
            let b = brain_frame(&spec.head, scale, x, y);
            let eps: f64 = StandardNormal.sample(&mut noise);
            let tex = texture.at(x, y, z);
            let (value, class) = if b.rho_outer > 1.0 {
                (BACKGROUND + 0.5 * NOISE * eps, 0)
            } else if b.rho >= 1.0 {
                (SKULL + NOISE * eps, 0)
            } else {
                match active.iter().rev().find(|(l, p)| covers(l, &b, *p)) {
                    Some((l, _)) => (l.intensity + 0.5 * tex + NOISE * eps, l.class.index()),
                    None if in_ventricle(&b, sv) => (CSF + 0.5 * tex + NOISE * eps, 0),
                    None => (spec.brain_level + tex + NOISE * eps, 0),
                }
            };
            image.push(value.clamp(0.0, 1.0));
            mask.push(class);
        }
    }
    Sample { patient: spec.id.clone(), slice: z as u32, image, mask }
}
