//! Samples, patient-grouped datasets, and their on-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<patient_id>/<slice_id>.img.pgm    P5, maxval 255
//! <root>/<split>/<patient_id>/<slice_id>.mask.pgm   P5, values 0..5
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{one_hot, to_signed, NUM_CLASSES};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "iph", "ivh", "sah", "edh", "sdh"];
pub const MANIFEST: &str = "manifest.json";

/// One slice: grayscale image in `[0, 1]` and its class-index mask,
/// both row-major `size * size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patient: String,
    pub slice: u32,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; NUM_CLASSES];
        self.mask.iter().for_each(|&m| seen[m as usize] = true);
        (1..NUM_CLASSES as u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Rounds intensities to the 8-bit grid used on disk.
    pub fn quantize(&mut self) {
        self.image.iter_mut().for_each(|v| *v = quantize_u8(*v) as f64 / 255.0);
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Generation seed per patient id, carried into the manifest.
    pub patient_seeds: IndexMap<String, u64>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Patient ids of a split in first-appearance order.
    pub fn patients(&self, split: Split) -> Vec<String> {
        patient_ids(self.split(split))
    }

    pub fn quantize(&mut self) {
        self.train.iter_mut().chain(self.test.iter_mut()).for_each(Sample::quantize);
    }
}

pub fn patient_ids(samples: &[Sample]) -> Vec<String> {
    let mut ids: IndexMap<&str, ()> = IndexMap::new();
    for s in samples {
        ids.entry(s.patient.as_str()).or_default();
    }
    ids.keys().map(|s| s.to_string()).collect()
}

/// Stacks images into `[N, 1, S, S]` in the generator's `[-1, 1]` range
/// when `signed`, else as stored.
pub fn image_batch(samples: &[&Sample], size: usize, signed: bool) -> Tensor {
    let data: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.image.iter().map(move |&v| if signed { to_signed(v) } else { v }))
        .collect();
    Tensor::new(vec![samples.len(), 1, size, size], data).expect("images are finite")
}

pub fn mask_batch(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.mask.iter().copied()).collect()
}

pub fn condition_batch(samples: &[&Sample], size: usize) -> Tensor {
    one_hot(&mask_batch(samples), samples.len(), size)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary 8-bit PGM; returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(Error::format(path, format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub seed: u64,
    pub slices: Vec<u32>,
    /// Lesion classes present on any slice.
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub patients: usize,
    pub slices: usize,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, Vec<ManifestPatient>>,
    pub class_inventory: BTreeMap<String, BTreeMap<String, ClassCount>>,
}

fn slice_file(root: &Path, split: Split, patient: &str, slice: u32, kind: &str) -> PathBuf {
    root.join(split.name()).join(patient).join(format!("{slice:03}.{kind}.pgm"))
}

pub fn manifest(ds: &Dataset) -> Manifest {
    let mut splits = BTreeMap::new();
    let mut inventory = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let samples = ds.split(split);
        let mut patients: IndexMap<&str, (Vec<u32>, [bool; NUM_CLASSES])> = IndexMap::new();
        let mut counts: BTreeMap<String, ClassCount> =
            CLASS_NAMES[1..].iter().map(|n| (n.to_string(), ClassCount::default())).collect();
        for s in samples {
            let entry = patients.entry(&s.patient).or_insert_with(|| (Vec::new(), [false; NUM_CLASSES]));
            entry.0.push(s.slice);
            let mut pixels = [0usize; NUM_CLASSES];
            s.mask.iter().for_each(|&m| pixels[m as usize] += 1);
            for c in 1..NUM_CLASSES {
                if pixels[c] > 0 {
                    entry.1[c] = true;
                    let cc = counts.get_mut(CLASS_NAMES[c]).unwrap();
                    cc.slices += 1;
                    cc.pixels += pixels[c];
                }
            }
        }
        let list = patients
            .iter()
            .map(|(id, (slices, present))| {
                let classes: Vec<String> = (1..NUM_CLASSES).filter(|&c| present[c]).map(|c| CLASS_NAMES[c].to_string()).collect();
                for c in &classes {
                    counts.get_mut(c).unwrap().patients += 1;
                }
                ManifestPatient { id: id.to_string(), seed: ds.patient_seeds.get(*id).copied().unwrap_or(0), slices: slices.clone(), classes }
            })
            .collect();
        splits.insert(split.name().to_string(), list);
        inventory.insert(split.name().to_string(), counts);
    }
    Manifest {
        image_size: ds.image_size,
        seed: ds.seed,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        splits,
        class_inventory: inventory,
    }
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let s = ds.image_size;
    for split in [Split::Train, Split::Test] {
        for sample in ds.split(split) {
            let dir = root.join(split.name()).join(&sample.patient);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let img: Vec<u8> = sample.image.iter().map(|&v| quantize_u8(v)).collect();
            write_pgm(&slice_file(root, split, &sample.patient, sample.slice, "img"), s, s, &img)?;
            write_pgm(&slice_file(root, split, &sample.patient, sample.slice, "mask"), s, s, &sample.mask)?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest(ds)).expect("manifest serializes");
    let path = root.join(MANIFEST);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let size = m.image_size;
    let mut ds = Dataset { image_size: size, seed: m.seed, train: Vec::new(), test: Vec::new(), patient_seeds: IndexMap::new() };
    for split in [Split::Train, Split::Test] {
        let mut out = Vec::new();
        for p in m.splits.get(split.name()).map(Vec::as_slice).unwrap_or(&[]) {
            ds.patient_seeds.insert(p.id.clone(), p.seed);
            for &slice in &p.slices {
                let load = |kind: &str| -> Result<Vec<u8>> {
                    let file = slice_file(root, split, &p.id, slice, kind);
                    let (w, h, px) = read_pgm(&file)?;
                    if w != size || h != size {
                        return Err(Error::format(&file, format!("{w}x{h} image, manifest says {size}x{size}")));
                    }
                    Ok(px)
                };
                let image = load("img")?.into_iter().map(|b| b as f64 / 255.0).collect();
                let mask = load("mask")?;
                if let Some(&bad) = mask.iter().find(|&&m| m as usize >= NUM_CLASSES) {
                    let file = slice_file(root, split, &p.id, slice, "mask");
                    return Err(Error::format(&file, format!("mask value {bad} outside 0..{}", NUM_CLASSES - 1)));
                }
                out.push(Sample { patient: p.id.clone(), slice, image, mask });
            }
        }
        match split {
            Split::Train => ds.train = out,
            Split::Test => ds.test = out,
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 4, 3, &px).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (4, 3, px.clone()));

        let mut bytes = b"P5\n# made by hand\n4 3\n255\n".to_vec();
        bytes.extend_from_slice(&px);
        fs::write(&path, bytes).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (4, 3, px));
    }

    #[test]
    fn pgm_rejects_wrong_magic_and_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        fs::write(&path, b"P2\n1 1\n255\n\x00").unwrap();
        assert!(read_pgm(&path).is_err());
        fs::write(&path, b"P5\n2 2\n255\n\x00").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut s = Sample { patient: "p".into(), slice: 0, image: vec![0.1234, 0.5, 1.2, -0.1], mask: vec![0; 4] };
        s.quantize();
        let once = s.image.clone();
        s.quantize();
        assert_eq!(once, s.image);
        assert_eq!(once[2], 1.0);
        assert_eq!(once[3], 0.0);
    }
}
