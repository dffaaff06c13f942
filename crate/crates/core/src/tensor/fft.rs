//! Real-input 2D DFT over the two trailing axes of a `[C, H, W]` tensor.
//!
//! The forward transform is unnormalized; the inverse carries `1 / (H * W)`.
//! Spectra keep the non-redundant half of the last axis, `W / 2 + 1` bins.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Tensor;
use crate::error::{dim_err, Result};

/// Half-spectrum of a real `[C, H, W]` signal, stored as interleaved
/// `(re, im)` pairs over `[C, H, W / 2 + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    channels: usize,
    height: usize,
    width_half: usize,
    data: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(channels: usize, height: usize, width_half: usize) -> Self {
        Self { channels, height, width_half, data: vec![0.0; channels * height * width_half * 2] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width_half]
    }

    pub fn get(&self, c: usize, k1: usize, k2: usize) -> Complex64 {
        let i = 2 * ((c * self.height + k1) * self.width_half + k2);
        Complex64::new(self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, c: usize, k1: usize, k2: usize, v: Complex64) {
        let i = 2 * ((c * self.height + k1) * self.width_half + k2);
        self.data[i] = v.re;
        self.data[i + 1] = v.im;
    }

    pub fn interleaved(&self) -> &[f64] {
        &self.data
    }

    /// Same memory viewed as a real `[C, H, W / 2 + 1, 2]` tensor.
    pub fn into_tensor(self) -> Tensor {
        Tensor::from_parts(vec![self.channels, self.height, self.width_half, 2], self.data)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.shape()[..] {
            [c, h, wh, 2] => Ok(Self { channels: c, height: h, width_half: wh, data: t.into_data() }),
            _ => Err(dim_err(format!(
                "a spectrum tensor must have shape [C, H, W/2+1, 2], got {:?}",
                t.shape()
            ))),
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Runs an in-place complex FFT of length `h` down every column of a
/// row-major `[h, wh]` complex plane.
fn columns_fft(plane: &mut [Complex64], h: usize, wh: usize, fft: &dyn Fft<f64>, col: &mut Vec<Complex64>) {
    if h == 1 {
        return;
    }
    col.resize(h, Complex64::default());
    for k2 in 0..wh {
        for k1 in 0..h {
            col[k1] = plane[k1 * wh + k2];
        }
        fft.process(col);
        for k1 in 0..h {
            plane[k1 * wh + k2] = col[k1];
        }
    }
}

/// Unnormalized real-to-complex 2D DFT of every channel.
pub fn rfft2(x: &Tensor) -> Result<ComplexGrid> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 {
        return Err(dim_err(format!("rfft2 of empty extents {:?}", x.shape())));
    }
    let wh = w / 2 + 1;
    let row_fft = plan(w, false);
    let col_fft = plan(h, false);
    let mut grid = ComplexGrid::zeros(c, h, wh);
    let mut row = vec![Complex64::default(); w];
    let mut col = Vec::new();
    let mut plane = vec![Complex64::default(); h * wh];
    for ch in 0..c {
        for r in 0..h {
            for (dst, &v) in row.iter_mut().zip(&x.data()[(ch * h + r) * w..(ch * h + r + 1) * w]) {
                *dst = Complex64::new(v, 0.0);
            }
            row_fft.process(&mut row);
            plane[r * wh..(r + 1) * wh].copy_from_slice(&row[..wh]);
        }
        columns_fft(&mut plane, h, wh, col_fft.as_ref(), &mut col);
        let out = &mut grid.data[ch * h * wh * 2..(ch + 1) * h * wh * 2];
        for (pair, z) in out.chunks_exact_mut(2).zip(&plane) {
            pair[0] = z.re;
            pair[1] = z.im;
        }
    }
    Ok(grid)
}

/// Inverse of [`rfft2`] for a signal of width `w`, scaled by `1 / (H * W)`.
///
/// Follows the usual complex-to-real convention: the imaginary parts of the
/// self-conjugate columns (`k2 = 0`, and `k2 = W / 2` for even `W`) are ignored.
pub fn irfft2(g: &ComplexGrid, h: usize, w: usize) -> Result<Tensor> {
    let [c, gh, wh] = g.shape();
    if gh != h || wh != w / 2 + 1 || h == 0 || w == 0 {
        return Err(dim_err(format!(
            "irfft2: spectrum [{c}, {gh}, {wh}] cannot produce a {h}x{w} signal"
        )));
    }
    let row_ifft = plan(w, true);
    let col_ifft = plan(h, true);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; c * h * w];
    let mut plane = vec![Complex64::default(); h * wh];
    let mut col = Vec::new();
    let mut row = vec![Complex64::default(); w];
    for ch in 0..c {
        for (z, pair) in plane.iter_mut().zip(g.data[ch * h * wh * 2..(ch + 1) * h * wh * 2].chunks_exact(2)) {
            *z = Complex64::new(pair[0], pair[1]);
        }
        columns_fft(&mut plane, h, wh, col_ifft.as_ref(), &mut col);
        for r in 0..h {
            let half = &plane[r * wh..(r + 1) * wh];
            row[0] = Complex64::new(half[0].re, 0.0);
            row[1..wh].copy_from_slice(&half[1..wh]);
            if w.is_multiple_of(2) && w > 1 {
                row[w / 2] = Complex64::new(half[w / 2].re, 0.0);
            }
            for k in wh..w {
                row[k] = row[w - k].conj();
            }
            row_ifft.process(&mut row);
            for (dst, z) in out[(ch * h + r) * w..(ch * h + r + 1) * w].iter_mut().zip(&row) {
                *dst = z.re * norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Multiplicity of column `k2` in the full spectrum: 1 for self-conjugate
/// columns, 2 for columns that stand in for a mirrored partner.
pub(crate) fn column_multiplicity(k2: usize, w: usize) -> f64 {
    if k2 == 0 || (w.is_multiple_of(2) && k2 == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Vector-Jacobian product of [`rfft2`] (spectrum viewed as real pairs).
///
/// The adjoint is `Re sum_k G[k] e^{+i theta}` over the half grid, which equals
/// `H * W * irfft2(G / multiplicity)`.
pub(crate) fn rfft2_backward(grad: &ComplexGrid, h: usize, w: usize) -> Result<Tensor> {
    let mut scaled = grad.clone();
    scale_columns(&mut scaled, |k2| (h * w) as f64 / column_multiplicity(k2, w));
    irfft2(&scaled, h, w)
}

/// Vector-Jacobian product of [`irfft2`]: `multiplicity / (H * W) * rfft2(grad)`.
pub(crate) fn irfft2_backward(grad: &Tensor, w: usize) -> Result<ComplexGrid> {
    let (_, h, _) = grad.dims3()?;
    let mut spec = rfft2(grad)?;
    scale_columns(&mut spec, |k2| column_multiplicity(k2, w) / (h * w) as f64);
    Ok(spec)
}

fn scale_columns(g: &mut ComplexGrid, factor: impl Fn(usize) -> f64) {
    let wh = g.width_half;
    for (i, pair) in g.data.chunks_exact_mut(2).enumerate() {
        let f = factor(i % wh);
        pair[0] *= f;
        pair[1] *= f;
    }
}
