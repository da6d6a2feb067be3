use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

fn check(image: &[f64], width: usize, height: usize, min: usize, what: &str) -> Result<()> {
    if image.len() != width * height {
        return Err(Error::InvalidInput(format!("{} pixels for a {width}x{height} image", image.len())));
    }
    if width < min || height < min || (min == 1 && width * height < 2) {
        return Err(Error::InvalidInput(format!("{what} needs a larger image than {width}x{height}")));
    }
    Ok(())
}

/// Mean 2-D DFT magnitude over every bin except DC; grows with sharpness.
pub fn blur_fft(image: &[f64], width: usize, height: usize) -> Result<f64> {
    check(image, width, height, 1, "blur_fft")?;
    // Offsetting by one pixel value moves only the DC bin and makes a
    // constant image transform to exact zeros.
    let offset = image[0];
    let mut buf: Vec<Complex<f64>> = image.iter().map(|&v| Complex::new(v - offset, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let rows = planner.plan_fft_forward(width);
    for row in buf.chunks_exact_mut(width) {
        rows.process(row);
    }
    let cols = planner.plan_fft_forward(height);
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        cols.process(&mut col);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    let total: f64 = buf.iter().skip(1).map(|c| c.norm()).sum();
    Ok(total / (buf.len() - 1) as f64)
}

/// Variance of the 3x3 Laplacian response over the valid region.
pub fn blur_laplacian_var(image: &[f64], width: usize, height: usize) -> Result<f64> {
    check(image, width, height, 3, "blur_laplacian_var")?;
    let at = |x: usize, y: usize| image[y * width + x];
    let mut resp = Vec::with_capacity((width - 2) * (height - 2));
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let c = at(x, y);
            resp.push((at(x - 1, y) - c) + (at(x + 1, y) - c) + (at(x, y - 1) - c) + (at(x, y + 1) - c));
        }
    }
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    Ok(resp.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}
