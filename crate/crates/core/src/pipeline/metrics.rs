//! Image quality metrics for `[C, H, W]` images in `[0, 1]`.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Returned when the mean squared error drops below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < PSNR_MSE_FLOOR { PSNR_CAP } else { -10.0 * m.log10() })
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every fully contained 11×11 Gaussian
/// window, averaged over channels (dynamic range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * h * w..(ch + 1) * h * w];
        let y = &b.data()[ch * h * w..(ch + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|p| filter_valid(p, h, w, &taps));
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}
