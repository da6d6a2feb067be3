//! Procedural CT-like head phantoms with five hemorrhage classes.
//!
//! Geometry lives in unit-square image coordinates, so the same patient
//! renders at any resolution. Lesion placement is expressed in a
//! normalized brain frame where the inner skull boundary is `rho = 1`.

mod render;

pub use render::{brain_frame, slice_scale, BrainPoint};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive, tag, Rng};

pub const MIN_SLICES: usize = 8;
pub const MAX_SLICES: usize = 16;
pub const MIN_IMAGE_SIZE: usize = 32;

/// Hemorrhage classes; the discriminant is the mask value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lesion {
    Iph = 1,
    Ivh = 2,
    Sah = 3,
    Edh = 4,
    Sdh = 5,
}

impl Lesion {
    pub const ALL: [Lesion; 5] = [Lesion::Iph, Lesion::Ivh, Lesion::Sah, Lesion::Edh, Lesion::Sdh];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get((i as usize).wrapping_sub(1)).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadGeometry {
    pub center: (f64, f64),
    /// Outer skull semi-axes, unit-square fractions.
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub skull: f64,
}

/// Placement of one lesion. Field meaning depends on the class:
///
/// | class | `rho`, `theta` | `size` | `aspect` |
/// |-------|----------------|--------|----------|
/// | IPH | blob center | radius | axis ratio |
/// | IVH | lobe cluster center | lobe spread | unused |
/// | SAH | ribbon centerline, arc center | thickness | arc half-width (rad) |
/// | EDH | arc center (`rho` unused) | max thickness | arc half-width (rad) |
/// | SDH | arc center (`rho` unused) | thickness | arc half-width (rad) |
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionPlan {
    pub class: Lesion,
    pub first_slice: usize,
    pub last_slice: usize,
    pub rho: f64,
    pub theta: f64,
    pub size: f64,
    pub aspect: f64,
    pub phase: f64,
    pub intensity: f64,
}

impl LesionPlan {
    /// Extreme `rho` the lesion can reach, as `(inner, outer)`.
    pub fn rho_extent(&self) -> (f64, f64) {
        match self.class {
            Lesion::Iph => {
                let r = self.size * self.aspect.max(1.0) * 1.15;
                (self.rho - r, self.rho + r)
            }
            Lesion::Ivh => (0.0, self.rho + 1.3 * self.size),
            Lesion::Sah => (self.rho - self.size / 2.0 - render::SAH_WAVE, self.rho + self.size / 2.0 + render::SAH_WAVE),
            Lesion::Edh | Lesion::Sdh => (1.0 - self.size, 1.0),
        }
    }

    fn validate(&self, slices: usize) -> std::result::Result<(), String> {
        if self.first_slice > self.last_slice || self.last_slice >= slices {
            return Err(format!("slice range {}..={} outside 0..{slices}", self.first_slice, self.last_slice));
        }
        if !(self.size > 0.0 && self.aspect > 0.0) {
            return Err("size and aspect must be positive".into());
        }
        let (lo, hi) = self.rho_extent();
        let ok = match self.class {
            Lesion::Iph => hi <= DEEP_LIMIT,
            Lesion::Ivh => self.rho <= 0.25 && hi <= 0.6,
            Lesion::Sah => lo >= 0.65 && hi < 1.0,
            Lesion::Edh | Lesion::Sdh => self.size <= SKULL_BAND && self.aspect <= 1.4,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{:?} at rho {:.3}..{:.3} leaves its zone", self.class, lo, hi))
        }
    }
}

/// Parenchymal and ventricular lesions stay inside this radius.
pub const DEEP_LIMIT: f64 = 0.85;
/// Extra-axial lesions stay within this band of the inner skull.
pub const SKULL_BAND: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSpec {
    pub id: String,
    pub seed: u64,
    pub head: HeadGeometry,
    pub slices: usize,
    pub brain_level: f64,
    pub lesions: Vec<LesionPlan>,
}

impl PatientSpec {
    /// Draws a random patient. The first lesion spans every slice.
    pub fn random(id: impl Into<String>, seed: u64) -> Self {
        let mut r = Rng::seed_from_u64(seed);
        let slices = r.random_range(MIN_SLICES..=MAX_SLICES);
        let head = HeadGeometry {
            center: (0.5 + r.random_range(-0.02..0.02), 0.5 + r.random_range(-0.02..0.02)),
            semi_axes: (r.random_range(0.38..0.43), r.random_range(0.43..0.47)),
            angle: r.random_range(-0.15..0.15),
            skull: r.random_range(0.035..0.05),
        };
        let primary = Lesion::ALL[r.random_range(0..5)];
        let mut lesions = vec![random_lesion(&mut r, primary, 0, slices - 1)];
        let extra = match r.random_range(0..10) {
            0..=3 => 0,
            4..=7 => 1,
            _ => 2,
        };
        for _ in 0..extra {
            let class = Lesion::ALL[r.random_range(0..5)];
            let len = r.random_range(2..=slices);
            let first = r.random_range(0..=slices - len);
            lesions.push(random_lesion(&mut r, class, first, first + len - 1));
        }
        PatientSpec { id: id.into(), seed, head, slices, brain_level: r.random_range(0.36..0.44), lesions }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::InvalidInput(format!("patient {} has no slices", self.id)));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            l.validate(self.slices).map_err(|e| Error::InvalidInput(format!("patient {} lesion {i}: {e}", self.id)))?;
        }
        Ok(())
    }
}

fn random_lesion(r: &mut Rng, class: Lesion, first_slice: usize, last_slice: usize) -> LesionPlan {
    let theta = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let intensity = r.random_range(0.64..0.78);
    let (rho, size, aspect) = match class {
        Lesion::Iph => {
            let size = r.random_range(0.12..0.2);
            let aspect = r.random_range(0.7..1.3);
            let reach = size * f64::max(aspect, 1.0) * 1.15;
            (r.random_range(0.2..DEEP_LIMIT - reach), size, aspect)
        }
        Lesion::Ivh => (r.random_range(0.0..0.2), r.random_range(0.1..0.16), 1.0),
        Lesion::Sah => (r.random_range(0.8..0.86), r.random_range(0.07..0.1), r.random_range(0.5..0.9)),
        Lesion::Edh => (1.0, r.random_range(0.18..0.28), r.random_range(0.35..0.6)),
        Lesion::Sdh => (1.0, r.random_range(0.07..0.11), r.random_range(0.8..1.3)),
    };
    LesionPlan { class, first_slice, last_slice, rho, theta, size, aspect, phase, intensity }
}

/// Renders every slice of a patient. Images are float and unquantized.
pub fn generate_patient(spec: &PatientSpec, image_size: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidInput(format!("phantom image size must be at least {MIN_IMAGE_SIZE}, got {image_size}")));
    }
    Ok((0..spec.slices).map(|z| render::slice(spec, z, image_size)).collect())
}

/// Train patients are `tr0000...`, test patients `te0000...`.
pub fn generate_dataset(n_train: usize, n_test: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    generate_dataset_with(Exec::default(), n_train, n_test, image_size, seed)
}

pub fn generate_dataset_with(exec: Exec, n_train: usize, n_test: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidInput("need at least one train and one test patient".into()));
    }
    let mut seeds = IndexMap::new();
    let mut build = |split: Split, n: usize, prefix: &str| -> Result<Vec<Sample>> {
        let specs: Vec<PatientSpec> = (0..n)
            .map(|i| PatientSpec::random(format!("{prefix}{i:04}"), derive(seed, &[tag(split.name()), i as u64])))
            .collect();
        for s in &specs {
            seeds.insert(s.id.clone(), s.seed);
        }
        let rendered = exec.map(n, |i| generate_patient(&specs[i], image_size));
        Ok(rendered.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
    };
    let train = build(Split::Train, n_train, "tr")?;
    let test = build(Split::Test, n_test, "te")?;
    Ok(Dataset { image_size, seed, train, test, patient_seeds: seeds })
}

/// Keeps `ceil(percent / 100 * patients)` training patients, chosen as a
/// prefix of one seeded permutation so subsets nest as `percent` grows.
/// Every slice of a chosen patient is kept; the test split is untouched.
pub fn subset_by_patients(ds: &Dataset, percent: f64, seed: u64) -> Result<Dataset> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::InvalidInput(format!("subset percent must be in (0, 100], got {percent}")));
    }
    let mut patients = ds.patients(Split::Train);
    let total = patients.len();
    let keep = ((percent * total as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    patients.shuffle(&mut Rng::seed_from_u64(derive(seed, &[tag("subset")])));
    let chosen: std::collections::HashSet<&str> = patients[..keep.min(total)].iter().map(String::as_str).collect();
    let mut out = ds.clone();
    out.train.retain(|s| chosen.contains(s.patient.as_str()));
    Ok(out)
}
