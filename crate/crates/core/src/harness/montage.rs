use std::path::Path;

use crate::data::quantize_u8;
use crate::error::{Error, Result};

/// Mask colors for classes 0..5: background, IPH, IVH, SAH, EDH, SDH.
pub const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48]];

pub fn decode_color(rgb: [u8; 3]) -> Option<u8> {
    PALETTE.iter().position(|c| *c == rgb).map(|i| i as u8)
}

fn side(len: usize) -> Option<usize> {
    let s = (len as f64).sqrt().round() as usize;
    (s > 0 && s * s == len).then_some(s)
}

/// RGB grid with one row per triple: colored mask, target, output.
pub fn montage_pixels(masks: &[&[u8]], targets: &[&[f64]], outputs: &[&[f64]]) -> Result<(usize, usize, Vec<u8>)> {
    if masks.len() != targets.len() || masks.len() != outputs.len() {
        return Err(Error::InvalidInput(format!(
            "montage needs equal lists, got {} masks, {} targets, {} outputs",
            masks.len(),
            targets.len(),
            outputs.len()
        )));
    }
    if masks.is_empty() {
        return Err(Error::InvalidInput("montage needs at least one row".into()));
    }
    let s = side(masks[0].len()).ok_or_else(|| Error::InvalidInput("montage cells must be square".into()))?;
    let plane = s * s;
    let all_sized = masks.iter().all(|m| m.len() == plane)
        && targets.iter().chain(outputs).all(|im| im.len() == plane);
    if !all_sized {
        return Err(Error::InvalidInput(format!("every montage cell must be {s}x{s}")));
    }
    let (w, h) = (3 * s, masks.len() * s);
    let mut rgb = vec![0u8; w * h * 3];
    for (row, ((m, t), o)) in masks.iter().zip(targets).zip(outputs).enumerate() {
        for y in 0..s {
            for x in 0..s {
                let p = y * s + x;
                let class = m[p] as usize;
                let color = *PALETTE
                    .get(class)
                    .ok_or_else(|| Error::InvalidInput(format!("mask class {class} has no color")))?;
                let gray = |v: f64| [quantize_u8(v); 3];
                for (col, c) in [color, gray(t[p]), gray(o[p])].into_iter().enumerate() {
                    let at = (((row * s + y) * w) + col * s + x) * 3;
                    rgb[at..at + 3].copy_from_slice(&c);
                }
            }
        }
    }
    Ok((w, h, rgb))
}

/// Writes the montage as a binary PPM.
pub fn emit_montage(masks: &[&[u8]], targets: &[&[f64]], outputs: &[&[f64]], path: &Path) -> Result<()> {
    let (w, h, rgb) = montage_pixels(masks, targets, outputs)?;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
