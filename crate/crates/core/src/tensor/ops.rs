//! Pure forward kernels and their vector-Jacobian products.
//!
//! Every `*_backward` function takes the upstream gradient plus whatever the
//! forward pass needs and returns gradients for the differentiable inputs.
//! Convolutions use zero padding and cross-correlation indexing.

use super::Tensor;
use crate::error::{dim_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Linear layers
// ---------------------------------------------------------------------------

/// `y[l, j] = sum_i x[l, i] * w[i, j] + b[j]` for `x: [L, Cin]`, `w: [Cin, Cout]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (l, cin, cout) = linear_dims(x, weight, bias)?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; l * cout];
    for (row, y) in out.chunks_exact_mut(cout).enumerate() {
        y.copy_from_slice(bd);
        for (i, &xv) in xd[row * cin..(row + 1) * cin].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, &w) in y.iter_mut().zip(&wd[i * cout..(i + 1) * cout]) {
                *yv += xv * w;
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, cout], out))
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let cin = weight.shape()[0];
    let cout = weight.shape()[1];
    let l = x.shape()[0];
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let mut gx = vec![0.0; l * cin];
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for row in 0..l {
        let g = &gd[row * cout..(row + 1) * cout];
        let xr = &xd[row * cin..(row + 1) * cin];
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv;
        }
        for i in 0..cin {
            let w = &wd[i * cout..(i + 1) * cout];
            gx[row * cin + i] = w.iter().zip(g).map(|(a, b)| a * b).sum();
            let xv = xr[i];
            if xv != 0.0 {
                for (gwv, &gv) in gw[i * cout..(i + 1) * cout].iter_mut().zip(g) {
                    *gwv += xv * gv;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![l, cin], gx),
        Tensor::from_parts(vec![cin, cout], gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

fn linear_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (l, cin) = x.dims2()?;
    let (win, cout) = weight.dims2()?;
    if cin != win || bias.shape() != [cout] {
        return Err(dim_err(format!(
            "linear: input {:?}, weight {:?}, bias {:?} do not agree",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((l, cin, cout))
}

/// Pointwise (1x1) projection over the channel axis of a `[Cin, H, W]` map with
/// a `[Cin, Cout]` weight, i.e. `linear` applied at every pixel.
pub fn linear_chw(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let (win, cout) = weight.dims2()?;
    if cin != win || bias.shape() != [cout] {
        return Err(dim_err(format!(
            "pointwise projection: input {:?}, weight {:?}, bias {:?} do not agree",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let p = h * w;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; cout * p];
    for (o, y) in out.chunks_exact_mut(p).enumerate() {
        y.fill(bias.data()[o]);
        for i in 0..cin {
            let wv = wd[i * cout + o];
            if wv == 0.0 {
                continue;
            }
            for (yv, &xv) in y.iter_mut().zip(&xd[i * p..(i + 1) * p]) {
                *yv += wv * xv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, h, w], out))
}

pub fn linear_chw_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let cin = weight.shape()[0];
    let cout = weight.shape()[1];
    let p = x.len() / cin;
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let mut gx = vec![0.0; cin * p];
    let mut gw = vec![0.0; cin * cout];
    let gb: Vec<f64> = gd.chunks_exact(p).map(|g| g.iter().sum()).collect();
    for i in 0..cin {
        let xi = &xd[i * p..(i + 1) * p];
        let gxi = &mut gx[i * p..(i + 1) * p];
        for o in 0..cout {
            let g = &gd[o * p..(o + 1) * p];
            gw[i * cout + o] = xi.iter().zip(g).map(|(a, b)| a * b).sum();
            let wv = wd[i * cout + o];
            if wv != 0.0 {
                for (gv, &go) in gxi.iter_mut().zip(g) {
                    *gv += wv * go;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![cin, cout], gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

fn odd_kernel(k: usize, what: &str) -> Result<usize> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("{what}: kernel size {k} must be odd")));
    }
    Ok(k / 2)
}

/// Dense 2D convolution: `x: [Cin, H, W]`, `weight: [Cout, Cin, k, k]`, `bias: [Cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let (cout, k) = match weight.shape() {
        &[co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
        s => {
            return Err(dim_err(format!(
                "conv2d: weight {s:?} incompatible with input {:?}",
                x.shape()
            )))
        }
    };
    if bias.shape() != [cout] {
        return Err(dim_err(format!("conv2d: bias {:?} for {cout} outputs", bias.shape())));
    }
    let pad = odd_kernel(k, "conv2d")? as isize;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        let y = &mut out[o * h * w..(o + 1) * h * w];
        y.fill(bias.data()[o]);
        for i in 0..cin {
            let xi = &xd[i * h * w..(i + 1) * h * w];
            let kern = &wd[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
            accumulate_correlation(y, xi, kern, h, w, k, pad);
        }
    }
    Ok(Tensor::from_parts(vec![cout, h, w], out))
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [cin, h, w] = x.shape()[..] else { unreachable!() };
    let [cout, _, k, _] = weight.shape()[..] else { unreachable!() };
    let pad = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let mut gx = vec![0.0; cin * h * w];
    let mut gw = vec![0.0; cout * cin * k * k];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let g = &gd[o * h * w..(o + 1) * h * w];
        gb[o] = g.iter().sum();
        for i in 0..cin {
            let base = (o * cin + i) * k * k;
            let kern = &wd[base..base + k * k];
            accumulate_correlation_adjoint(
                &mut gx[i * h * w..(i + 1) * h * w],
                g,
                kern,
                h,
                w,
                k,
                pad,
            );
            kernel_gradient(&mut gw[base..base + k * k], g, &xd[i * h * w..(i + 1) * h * w], h, w, k, pad);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

/// Depth-wise 2D convolution: `x: [C, H, W]`, `kernel: [C, k, k]`, no bias.
pub fn dwconv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let k = match kernel.shape() {
        &[kc, k1, k2] if kc == c && k1 == k2 => k1,
        s => {
            return Err(dim_err(format!(
                "dwconv2d: kernel {s:?} incompatible with input {:?}",
                x.shape()
            )))
        }
    };
    let pad = odd_kernel(k, "dwconv2d")? as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        accumulate_correlation(
            &mut out[ch * h * w..(ch + 1) * h * w],
            &x.data()[ch * h * w..(ch + 1) * h * w],
            &kernel.data()[ch * k * k..(ch + 1) * k * k],
            h,
            w,
            k,
            pad,
        );
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Returns `(grad_x, grad_kernel)`.
pub fn dwconv2d_backward(x: &Tensor, kernel: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let [c, h, w] = x.shape()[..] else { unreachable!() };
    let k = kernel.shape()[1];
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; c * h * w];
    let mut gk = vec![0.0; c * k * k];
    for ch in 0..c {
        let g = &grad.data()[ch * h * w..(ch + 1) * h * w];
        let kern = &kernel.data()[ch * k * k..(ch + 1) * k * k];
        accumulate_correlation_adjoint(&mut gx[ch * h * w..(ch + 1) * h * w], g, kern, h, w, k, pad);
        kernel_gradient(
            &mut gk[ch * k * k..(ch + 1) * k * k],
            g,
            &x.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            k,
            pad,
        );
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
    )
}

/// Valid output range along one axis for tap offset `d`, so that
/// `0 <= out + d - pad < n`.
#[inline]
fn tap_range(n: usize, d: usize, pad: isize) -> (usize, usize, isize) {
    let shift = d as isize - pad;
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    (lo, hi, shift)
}

/// `y[r, c] += sum_{dy, dx} kern[dy, dx] * x[r + dy - pad, c + dx - pad]`.
fn accumulate_correlation(y: &mut [f64], x: &[f64], kern: &[f64], h: usize, w: usize, k: usize, pad: isize) {
    for dy in 0..k {
        let (r0, r1, sy) = tap_range(h, dy, pad);
        for dx in 0..k {
            let kv = kern[dy * k + dx];
            if kv == 0.0 {
                continue;
            }
            let (c0, c1, sx) = tap_range(w, dx, pad);
            if c0 >= c1 {
                continue;
            }
            for r in r0..r1 {
                let src = ((r as isize + sy) as usize) * w;
                let src_row = &x[(src as isize + c0 as isize + sx) as usize..(src as isize + c1 as isize + sx) as usize];
                for (yv, &xv) in y[r * w + c0..r * w + c1].iter_mut().zip(src_row) {
                    *yv += kv * xv;
                }
            }
        }
    }
}

/// Adjoint of [`accumulate_correlation`] with respect to `x`.
fn accumulate_correlation_adjoint(gx: &mut [f64], g: &[f64], kern: &[f64], h: usize, w: usize, k: usize, pad: isize) {
    for dy in 0..k {
        let (r0, r1, sy) = tap_range(h, dy, pad);
        for dx in 0..k {
            let kv = kern[dy * k + dx];
            if kv == 0.0 {
                continue;
            }
            let (c0, c1, sx) = tap_range(w, dx, pad);
            if c0 >= c1 {
                continue;
            }
            for r in r0..r1 {
                let dst = ((r as isize + sy) as usize) * w;
                let dst_row = &mut gx[(dst as isize + c0 as isize + sx) as usize..(dst as isize + c1 as isize + sx) as usize];
                for (gv, &go) in dst_row.iter_mut().zip(&g[r * w + c0..r * w + c1]) {
                    *gv += kv * go;
                }
            }
        }
    }
}

fn kernel_gradient(gk: &mut [f64], g: &[f64], x: &[f64], h: usize, w: usize, k: usize, pad: isize) {
    for dy in 0..k {
        let (r0, r1, sy) = tap_range(h, dy, pad);
        for dx in 0..k {
            let (c0, c1, sx) = tap_range(w, dx, pad);
            if c0 >= c1 {
                continue;
            }
            let mut acc = 0.0;
            for r in r0..r1 {
                let src = (r as isize + sy) * w as isize + sx;
                acc += g[r * w + c0..r * w + c1]
                    .iter()
                    .zip(&x[(src + c0 as isize) as usize..(src + c1 as isize) as usize])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            gk[dy * k + dx] += acc;
        }
    }
}

/// Depth-wise 1D convolution along the sequence axis: `x: [L, C]`, `kernel: [C, k]`.
pub fn dwconv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, c) = x.dims2()?;
    let k = match kernel.shape() {
        &[kc, k] if kc == c => k,
        s => {
            return Err(dim_err(format!(
                "dwconv1d: kernel {s:?} incompatible with input {:?}",
                x.shape()
            )))
        }
    };
    let pad = odd_kernel(k, "dwconv1d")? as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; l * c];
    for t in 0..l {
        let y = &mut out[t * c..(t + 1) * c];
        for j in 0..k {
            let src = t as isize + j as isize - pad;
            if src < 0 || src >= l as isize {
                continue;
            }
            let xr = &xd[src as usize * c..(src as usize + 1) * c];
            for (ch, (yv, &xv)) in y.iter_mut().zip(xr).enumerate() {
                *yv += kd[ch * k + j] * xv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, c], out))
}

/// Returns `(grad_x, grad_kernel)`.
pub fn dwconv1d_backward(x: &Tensor, kernel: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let [l, c] = x.shape()[..] else { unreachable!() };
    let k = kernel.shape()[1];
    let pad = (k / 2) as isize;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad.data());
    let mut gx = vec![0.0; l * c];
    let mut gk = vec![0.0; c * k];
    for t in 0..l {
        let g = &gd[t * c..(t + 1) * c];
        for j in 0..k {
            let src = t as isize + j as isize - pad;
            if src < 0 || src >= l as isize {
                continue;
            }
            let s = src as usize;
            for ch in 0..c {
                gx[s * c + ch] += kd[ch * k + j] * g[ch];
                gk[ch * k + j] += xd[s * c + ch] * g[ch];
            }
        }
    }
    (
        Tensor::from_parts(vec![l, c], gx),
        Tensor::from_parts(vec![c, k], gk),
    )
}

// ---------------------------------------------------------------------------
// Activations and normalization
// ---------------------------------------------------------------------------

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * std_normal_cdf(v))
}

pub fn gelu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| g * (std_normal_cdf(v) + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp()))
            .collect(),
    )
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
}

pub fn softplus_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| g * sigmoid(v))
            .collect(),
    )
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Strided view of a normalization problem: `groups` independent vectors of
/// `channels` values, where element `(g, c)` sits at `g * group_stride + c * channel_stride`.
#[derive(Clone, Copy)]
struct NormLayout {
    groups: usize,
    channels: usize,
    group_stride: usize,
    channel_stride: usize,
}

impl NormLayout {
    #[inline]
    fn at(&self, g: usize, c: usize) -> usize {
        g * self.group_stride + c * self.channel_stride
    }
}

/// Saved statistics for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    /// Normalized values before the affine transform, same layout as the input.
    pub normalized: Tensor,
    /// One reciprocal standard deviation per normalized vector.
    pub rstd: Vec<f64>,
}

fn norm_forward(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64, lay: NormLayout) -> (Tensor, NormStats) {
    let xd = x.data();
    let n = lay.channels as f64;
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    let mut rstd = Vec::with_capacity(lay.groups);
    for g in 0..lay.groups {
        let mean = (0..lay.channels).map(|c| xd[lay.at(g, c)]).sum::<f64>() / n;
        let var = (0..lay.channels)
            .map(|c| (xd[lay.at(g, c)] - mean).powi(2))
            .sum::<f64>()
            / n;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        for c in 0..lay.channels {
            let i = lay.at(g, c);
            let v = (xd[i] - mean) * r;
            xhat[i] = v;
            y[i] = v * gain.data()[c] + shift.data()[c];
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), y),
        NormStats { normalized: Tensor::from_parts(x.shape().to_vec(), xhat), rstd },
    )
}

fn norm_backward(stats: &NormStats, gain: &Tensor, grad: &Tensor, lay: NormLayout) -> (Tensor, Tensor, Tensor) {
    let (xh, gd) = (stats.normalized.data(), grad.data());
    let n = lay.channels as f64;
    let mut gx = vec![0.0; xh.len()];
    let mut ggain = vec![0.0; lay.channels];
    let mut gshift = vec![0.0; lay.channels];
    for g in 0..lay.groups {
        let mut mean_gh = 0.0;
        let mut mean_ghx = 0.0;
        for c in 0..lay.channels {
            let i = lay.at(g, c);
            let gh = gd[i] * gain.data()[c];
            mean_gh += gh;
            mean_ghx += gh * xh[i];
            ggain[c] += gd[i] * xh[i];
            gshift[c] += gd[i];
        }
        mean_gh /= n;
        mean_ghx /= n;
        let r = stats.rstd[g];
        for c in 0..lay.channels {
            let i = lay.at(g, c);
            gx[i] = r * (gd[i] * gain.data()[c] - mean_gh - xh[i] * mean_ghx);
        }
    }
    (
        Tensor::from_parts(stats.normalized.shape().to_vec(), gx),
        Tensor::from_parts(vec![lay.channels], ggain),
        Tensor::from_parts(vec![lay.channels], gshift),
    )
}

fn check_affine(channels: usize, gain: &Tensor, shift: &Tensor) -> Result<()> {
    if gain.shape() != [channels] || shift.shape() != [channels] {
        return Err(dim_err(format!(
            "layer_norm: gain {:?} / shift {:?} for {channels} channels",
            gain.shape(),
            shift.shape()
        )));
    }
    Ok(())
}

fn seq_layout(x: &Tensor) -> Result<NormLayout> {
    let (l, c) = x.dims2()?;
    Ok(NormLayout { groups: l, channels: c, group_stride: c, channel_stride: 1 })
}

fn chw_layout(x: &Tensor) -> Result<NormLayout> {
    let (c, h, w) = x.dims3()?;
    Ok(NormLayout { groups: h * w, channels: c, group_stride: 1, channel_stride: h * w })
}

/// Layer normalization over the channel axis of `x: [L, C]`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let lay = seq_layout(x)?;
    check_affine(lay.channels, gain, shift)?;
    Ok(norm_forward(x, gain, shift, eps, lay))
}

/// Returns `(grad_x, grad_gain, grad_shift)`.
pub fn layer_norm_backward(stats: &NormStats, gain: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let lay = seq_layout(&stats.normalized).expect("stats saved from a rank-2 forward");
    norm_backward(stats, gain, grad, lay)
}

/// Layer normalization over the channel axis of a `[C, H, W]` feature map,
/// independently at every pixel.
pub fn layer_norm_chw(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let lay = chw_layout(x)?;
    check_affine(lay.channels, gain, shift)?;
    Ok(norm_forward(x, gain, shift, eps, lay))
}

pub fn layer_norm_chw_backward(stats: &NormStats, gain: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let lay = chw_layout(&stats.normalized).expect("stats saved from a rank-3 forward");
    norm_backward(stats, gain, grad, lay)
}

// ---------------------------------------------------------------------------
// Bilinear resampling (align_corners = false)
// ---------------------------------------------------------------------------

/// Source taps along one axis: `(i0, i1, weight_of_i1)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of `x: [C, H, W]` to `[C, out_h, out_w]`.
pub fn resample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(dim_err(format!("bilinear resample of {:?} to {out_h}x{out_w}", x.shape())));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub fn resample_bilinear_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let [c, h, w] = input_shape[..] else { unreachable!() };
    let [_, out_h, out_w] = grad.shape()[..] else { unreachable!() };
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut gx = vec![0.0; c * h * w];
    let gd = grad.data();
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        let g = &gd[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                plane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Bilinear rescaling by 0.5 or 2.
pub fn bilinear_resize(x: &Tensor, factor: f64) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    let (oh, ow) = resize_extents(h, w, factor)?;
    resample_bilinear(x, oh, ow)
}

pub(crate) fn resize_extents(h: usize, w: usize, factor: f64) -> Result<(usize, usize)> {
    if factor == 2.0 {
        Ok((2 * h, 2 * w))
    } else if factor == 0.5 {
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(dim_err(format!("cannot halve odd extents {h}x{w}")));
        }
        Ok((h / 2, w / 2))
    } else {
        Err(Error::Config(format!("resize factor {factor} is not 0.5 or 2")))
    }
}

// ---------------------------------------------------------------------------
// Slicing
// ---------------------------------------------------------------------------

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Takes `len` entries starting at `start` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(dim_err(format!(
            "narrow: range {start}..{} on axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`narrow`]: embeds `grad` into zeros of `input_shape`.
pub fn narrow_backward(input_shape: &[usize], axis: usize, start: usize, grad: &Tensor) -> Tensor {
    let (outer, extent, inner) = axis_split(input_shape, axis);
    let len = grad.shape()[axis];
    let mut gx = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        gx[base..base + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear(&x, &eye, &Tensor::zeros([2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = linear(&x, &eye, &Tensor::new([2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let x = random(&[4, 3], 1);
        let w = random(&[3, 5], 2);
        let b = random(&[5], 3);
        let y = linear(&x, &w, &b).unwrap();
        for l in 0..4 {
            for j in 0..5 {
                let mut acc = b.at(&[j]);
                for i in 0..3 {
                    acc += x.at(&[l, i]) * w.at(&[i, j]);
                }
                assert!((y.at(&[l, j]) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear(&Tensor::zeros([2, 3]), &Tensor::zeros([4, 2]), &Tensor::zeros([2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn linear_chw_matches_per_pixel_linear() {
        let x = random(&[3, 2, 4], 4);
        let w = random(&[3, 5], 5);
        let b = random(&[5], 6);
        let y = linear_chw(&x, &w, &b).unwrap();
        for p in 0..8 {
            let row = Tensor::from_fn([1, 3], |i| x.data()[i * 8 + p]);
            let ref_row = linear(&row, &w, &b).unwrap();
            for o in 0..5 {
                assert!((y.data()[o * 8 + p] - ref_row.data()[o]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dwconv2d_delta_kernel_is_identity() {
        let x = random(&[2, 4, 5], 7);
        let mut k = Tensor::zeros([2, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        assert!(dwconv2d(&x, &k).unwrap().bit_eq(&x));
    }

    #[test]
    fn dwconv2d_all_ones() {
        let y = dwconv2d(&Tensor::ones([1, 3, 3]), &Tensor::ones([1, 3, 3])).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn dwconv2d_is_linear() {
        let x = random(&[2, 5, 4], 8);
        let k = random(&[2, 3, 3], 9);
        let a = dwconv2d(&x.scale(2.5), &k).unwrap();
        let b = dwconv2d(&x, &k).unwrap().scale(2.5);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-13);
    }

    #[test]
    fn even_kernels_are_rejected() {
        assert!(matches!(
            dwconv2d(&Tensor::zeros([1, 3, 3]), &Tensor::zeros([1, 2, 2])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            dwconv1d(&Tensor::zeros([4, 1]), &Tensor::zeros([1, 4])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dwconv1d_examples() {
        let x = Tensor::new([4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = dwconv1d(&x, &Tensor::ones([1, 3])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 0.0, 0.0]);

        let x = random(&[9, 3], 10);
        let mut delta = Tensor::zeros([3, 7]);
        for c in 0..3 {
            delta.data_mut()[c * 7 + 3] = 1.0;
        }
        assert!(dwconv1d(&x, &delta).unwrap().bit_eq(&x));

        let y = dwconv1d(&Tensor::full([12, 1], 0.7), &Tensor::full([1, 7], 1.0 / 7.0)).unwrap();
        for t in 3..9 {
            assert!((y.data()[t] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&Tensor::new([3], vec![0.0, 10.0, -10.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::new([1, 2], vec![1.0, 3.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::ones([2]), &Tensor::zeros([2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let x = Tensor::full([2, 4], 3.3);
        let (y, _) = layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4]), LAYER_NORM_EPS).unwrap();
        assert!(y.max_abs() < 1e-6);

        let x = random(&[5, 16], 11);
        let (y, _) = layer_norm(&x, &Tensor::ones([16]), &Tensor::zeros([16]), 1e-12).unwrap();
        for row in y.data().chunks(16) {
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_chw_matches_sequence_layout() {
        let x = random(&[4, 2, 3], 12);
        let gain = random(&[4], 13);
        let shift = random(&[4], 14);
        let (y, _) = layer_norm_chw(&x, &gain, &shift, LAYER_NORM_EPS).unwrap();
        let seq = Tensor::from_fn([6, 4], |i| x.data()[(i % 4) * 6 + i / 4]);
        let (ys, _) = layer_norm(&seq, &gain, &shift, LAYER_NORM_EPS).unwrap();
        for p in 0..6 {
            for c in 0..4 {
                assert!((y.data()[c * 6 + p] - ys.data()[p * 4 + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = Tensor::full([2, 4, 6], 0.3);
        let up = bilinear_resize(&x, 2.0).unwrap();
        assert_eq!(up.shape(), &[2, 8, 12]);
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let back = bilinear_resize(&up, 0.5).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn bilinear_upsample_matches_sampling_formula() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = bilinear_resize(&x, 2.0).unwrap();
        // Direct evaluation of the align-corners-false sampling formula.
        let sample = |o: usize| -> (usize, usize, f64) {
            let s: f64 = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(1), s - i0 as f64)
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, y1, fy) = sample(oy);
                let (x0, x1, fx) = sample(ox);
                let v = |r: usize, c: usize| x.at(&[0, r, c]);
                let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                    + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                assert!((up.at(&[0, oy, ox]) - want).abs() < 1e-15);
            }
        }
        assert_eq!(up.at(&[0, 0, 0]), 1.0);
        assert_eq!(up.at(&[0, 3, 3]), 4.0);
        assert!((up.at(&[0, 1, 1]) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn bilinear_half_rejects_odd() {
        assert!(bilinear_resize(&Tensor::zeros([1, 3, 4]), 0.5).is_err());
    }

    #[test]
    fn narrow_roundtrip() {
        let x = random(&[3, 5], 15);
        let part = narrow(&x, 1, 1, 3).unwrap();
        assert_eq!(part.shape(), &[3, 3]);
        assert_eq!(part.at(&[2, 0]), x.at(&[2, 1]));
        let back = narrow_backward(x.shape(), 1, 1, &part);
        assert_eq!(back.at(&[2, 1]), x.at(&[2, 1]));
        assert_eq!(back.at(&[2, 0]), 0.0);
    }
}
