//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "LCGN" | u32 version = 1 | u8 network kind | u32 record count
//! per record: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | f32 value * product(extents)
//! ```
//!
//! Batch-norm running statistics are stored as records prefixed `rs.`. The
//! record `meta.spec` carries `[image_size, base_filters, in_channels,
//! out_channels]` so a file can be loaded without outside context.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Network, NetworkKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCGN";
pub const VERSION: u32 = 1;
const RUNNING_PREFIX: &str = "rs.";
const SPEC_RECORD: &str = "meta.spec";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"LCGN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown network kind byte {0}")]
    UnknownKind(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed record: {0}")]
    Malformed(String),
}

fn records(net: &Network) -> Vec<(String, &Tensor)> {
    net.params
        .iter()
        .map(|(k, t)| (k.clone(), t))
        .chain(net.running.iter().map(|(k, t)| (format!("{RUNNING_PREFIX}{k}"), t)))
        .collect()
}

pub fn write_checkpoint<W: Write>(net: &Network, out: &mut W) -> std::io::Result<()> {
    let s = net.spec;
    let spec = Tensor::new(
        vec![4],
        vec![s.image_size as f64, s.base_filters as f64, s.in_channels as f64, s.out_channels as f64],
    )
    .expect("spec record is finite");
    let mut recs = records(net);
    recs.push((SPEC_RECORD.to_string(), &spec));

    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[s.kind.code()])?;
    out.write_all(&(recs.len() as u32).to_le_bytes())?;
    for (name, t) in recs {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.shape().len() as u8])?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R) -> std::result::Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> std::result::Result<Network, CheckpointError> {
    let magic: [u8; 4] = take(r)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let [code] = take::<_, 1>(r)?;
    let kind = NetworkKind::from_code(code).ok_or(CheckpointError::UnknownKind(code))?;
    let count = u32::from_le_bytes(take(r)?) as usize;

    let mut recs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| CheckpointError::Truncated)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let [rank] = take::<_, 1>(r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| CheckpointError::Truncated)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        recs.push((name, t));
    }

    let spec_rec = recs
        .iter()
        .find(|(n, _)| n == SPEC_RECORD)
        .ok_or_else(|| CheckpointError::MissingParameter(SPEC_RECORD.into()))?;
    let v = spec_rec.1.data();
    if v.len() != 4 {
        return Err(CheckpointError::Malformed("spec record must hold four values".into()));
    }
    let spec = NetworkSpec {
        kind,
        image_size: v[0] as usize,
        base_filters: v[1] as usize,
        in_channels: v[2] as usize,
        out_channels: v[3] as usize,
    };
    let mut net = Network::new(spec, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    for (name, t) in recs {
        if name == SPEC_RECORD {
            continue;
        }
        let slot = match name.strip_prefix(RUNNING_PREFIX) {
            Some(stat) => net.running.get_mut(stat),
            None => net.params.get_mut(&name),
        };
        let slot = slot.ok_or_else(|| CheckpointError::UnknownParameter(name.clone()))?;
        if slot.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch { name, expected: slot.shape().to_vec(), found: t.shape().to_vec() });
        }
        *slot = t;
        seen.insert(name);
    }
    if let Some((missing, _)) = records(&net).into_iter().find(|(n, _)| !seen.contains(n)) {
        return Err(CheckpointError::MissingParameter(missing));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(net, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_checkpoint(&mut BufReader::new(file))?)
}
