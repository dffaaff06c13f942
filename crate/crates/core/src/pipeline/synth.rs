//! Procedural sharp/blurred training pairs.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GAUSSIAN_SIGMA_RANGE: (f64, f64) = (0.8, 2.0);
pub const MOTION_LENGTH_RANGE: (f64, f64) = (3.0, 9.0);
pub const NOISE_SIGMA_MAX: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlurKind {
    Gaussian { sigma: f64 },
    /// Uniform blur along a segment of `length` pixels at `angle` radians.
    LinearMotion { length: f64, angle: f64 },
    /// Single-tap kernel; leaves the image unchanged.
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurSpec {
    pub kind: BlurKind,
    /// Odd kernel width.
    pub size: usize,
    pub noise_sigma: f64,
}

/// Which kernels random training pairs draw from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlurFamily {
    #[default]
    Gaussian,
    Motion,
    Mixed,
}

impl BlurFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            BlurFamily::Gaussian => "gaussian",
            BlurFamily::Motion => "motion",
            BlurFamily::Mixed => "mixed",
        }
    }
}

impl FromStr for BlurFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(BlurFamily::Gaussian),
            "motion" => Ok(BlurFamily::Motion),
            "mixed" => Ok(BlurFamily::Mixed),
            _ => Err(Error::Config(format!("unknown blur family `{s}` (gaussian, motion, mixed)"))),
        }
    }
}

impl BlurSpec {
    pub fn gaussian(sigma: f64, noise_sigma: f64) -> Self {
        let size = 2 * (3.0 * sigma).ceil() as usize + 1;
        Self { kind: BlurKind::Gaussian { sigma }, size, noise_sigma }
    }

    pub fn motion(length: f64, angle: f64, noise_sigma: f64) -> Self {
        let size = 2 * (length / 2.0).ceil() as usize + 1;
        Self { kind: BlurKind::LinearMotion { length, angle }, size, noise_sigma }
    }

    pub fn delta() -> Self {
        Self { kind: BlurKind::Delta, size: 1, noise_sigma: 0.0 }
    }

    pub fn random<R: Rng>(family: BlurFamily, rng: &mut R) -> Self {
        let motion = match family {
            BlurFamily::Gaussian => false,
            BlurFamily::Motion => true,
            BlurFamily::Mixed => rng.random::<bool>(),
        };
        let noise = rng.random_range(0.0..=NOISE_SIGMA_MAX);
        if motion {
            let (lo, hi) = MOTION_LENGTH_RANGE;
            Self::motion(rng.random_range(lo..=hi), rng.random_range(0.0..PI), noise)
        } else {
            let (lo, hi) = GAUSSIAN_SIGMA_RANGE;
            Self::gaussian(rng.random_range(lo..=hi), noise)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) {
            return Err(Error::Config(format!("blur kernel size {} must be odd", self.size)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        match self.kind {
            BlurKind::Gaussian { sigma } if !(sigma > 0.0) => Err(Error::Config("sigma must be positive".into())),
            BlurKind::LinearMotion { length, .. } if !(length >= 1.0) => {
                Err(Error::Config("motion length must be at least one pixel".into()))
            }
            _ => Ok(()),
        }
    }

    /// Normalized `[size, size]` kernel.
    pub fn kernel(&self) -> Tensor {
        let k = self.size;
        let r = (k / 2) as f64;
        let mut data = vec![0.0; k * k];
        match self.kind {
            BlurKind::Delta => data[k * k / 2] = 1.0,
            BlurKind::Gaussian { sigma } => {
                for y in 0..k {
                    for x in 0..k {
                        let (dy, dx) = (y as f64 - r, x as f64 - r);
                        data[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            BlurKind::LinearMotion { length, angle } => {
                // Splat evenly spaced points of the centred segment bilinearly.
                let steps = (4.0 * length).ceil() as usize + 1;
                let (dx, dy) = (angle.cos(), angle.sin());
                for s in 0..steps {
                    let t = (s as f64 / (steps - 1) as f64 - 0.5) * (length - 1.0);
                    let (px, py) = (r + t * dx, r + t * dy);
                    let (x0, y0) = (px.floor(), py.floor());
                    let (fx, fy) = (px - x0, py - y0);
                    for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let (xi, yi) = (x0 as isize + ox, y0 as isize + oy);
                            if (0..k as isize).contains(&xi) && (0..k as isize).contains(&yi) {
                                data[yi as usize * k + xi as usize] += wx * wy;
                            }
                        }
                    }
                }
            }
        }
        let total: f64 = data.iter().sum();
        Tensor::from_parts(vec![k, k], data.into_iter().map(|v| v / total).collect())
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Convolves each channel of `[C, H, W]` with a `[k, k]` kernel using
/// reflective borders.
pub fn blur_image(img: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (k, _) = kernel.dims2()?;
    let r = (k / 2) as isize;
    let (src, kd) = (img.data(), kernel.data());
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - r, w);
                        acc += kd[ky * k + kx] * plane[sy * w + sx];
                    }
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Random colour image made of a smooth gradient, rectangles and strokes.
pub fn sharp_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut img = vec![0.0; 3 * h * w];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let slope: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
                img[ch * h * w + y * w + x] = base[ch] + slope[ch].0 * u + slope[ch].1 * v;
            }
        }
    }
    let paint = |img: &mut [f64], inside: &dyn Fn(f64, f64) -> bool, colour: [f64; 3]| {
        for y in 0..h {
            for x in 0..w {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    for (ch, c) in colour.iter().enumerate() {
                        img[ch * h * w + y * w + x] = *c;
                    }
                }
            }
        }
    };
    let (fw, fh) = (w as f64, h as f64);
    for _ in 0..rng.random_range(2..=5) {
        let (x0, y0) = (rng.random_range(0.0..fw), rng.random_range(0.0..fh));
        let (rw, rh) = (rng.random_range(0.1..0.5) * fw, rng.random_range(0.1..0.5) * fh);
        let colour = std::array::from_fn(|_| rng.random::<f64>());
        paint(&mut img, &move |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh, colour);
    }
    for _ in 0..rng.random_range(1..=3) {
        let (ax, ay) = (rng.random_range(0.0..fw), rng.random_range(0.0..fh));
        let (bx, by) = (rng.random_range(0.0..fw), rng.random_range(0.0..fh));
        let half = rng.random_range(0.5..2.0);
        let colour = std::array::from_fn(|_| rng.random::<f64>());
        let (vx, vy) = (bx - ax, by - ay);
        let len2 = (vx * vx + vy * vy).max(1e-12);
        paint(
            &mut img,
            &move |x, y| {
                let t = (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (x - ax - t * vx, y - ay - t * vy);
                dx * dx + dy * dy <= half * half
            },
            colour,
        );
    }
    Tensor::from_parts(vec![3, h, w], img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// `(blurred, sharp)` pair of `size x size` images, deterministic in `seed`.
pub fn synth_pair(spec: &BlurSpec, size: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sharp = sharp_image(size, size, &mut rng);
    let mut blurred = blur_image(&sharp, &spec.kernel())?;
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in blurred.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let blurred = blurred.map(|v| v.clamp(0.0, 1.0));
    Ok((blurred, sharp))
}

/// Anisotropic total variation: sum of absolute neighbour differences.
pub fn total_variation(img: &Tensor) -> Result<f64> {
    let (c, h, w) = img.dims3()?;
    let d = img.data();
    let mut tv = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = ch * h * w + y * w + x;
                if x + 1 < w {
                    tv += (d[i + 1] - d[i]).abs();
                }
                if y + 1 < h {
                    tv += (d[i + w] - d[i]).abs();
                }
            }
        }
    }
    Ok(tv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for family in [BlurFamily::Gaussian, BlurFamily::Motion, BlurFamily::Mixed] {
            for _ in 0..20 {
                let spec = BlurSpec::random(family, &mut rng);
                spec.validate().unwrap();
                let k = spec.kernel();
                assert!((k.sum() - 1.0).abs() < 1e-12);
                assert!(k.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gaussian_kernel_is_symmetric() {
        let k = BlurSpec::gaussian(1.3, 0.0).kernel();
        let n = k.shape()[0];
        for y in 0..n {
            for x in 0..n {
                assert!((k.at(&[y, x]) - k.at(&[x, y])).abs() < 1e-15);
                assert!((k.at(&[y, x]) - k.at(&[n - 1 - y, n - 1 - x])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn horizontal_motion_stays_on_the_centre_row() {
        let k = BlurSpec::motion(5.0, 0.0, 0.0).kernel();
        let n = k.shape()[0];
        for y in 0..n {
            let row: f64 = (0..n).map(|x| k.at(&[y, x])).sum();
            assert_eq!(row > 0.0, y == n / 2);
        }
    }

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn delta_kernel_without_noise_is_identity() {
        let (blur, sharp) = synth_pair(&BlurSpec::delta(), 16, 3).unwrap();
        assert!(blur.bit_eq(&sharp));
    }

    #[test]
    fn pairs_are_deterministic_and_in_range() {
        let spec = BlurSpec::gaussian(1.5, 0.01);
        let a = synth_pair(&spec, 16, 9).unwrap();
        let b = synth_pair(&spec, 16, 9).unwrap();
        assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1));
        assert!(a.0.data().iter().chain(a.1.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blurring_reduces_total_variation() {
        for seed in 0..10 {
            let (blur, sharp) = synth_pair(&BlurSpec::gaussian(1.0, 0.0), 32, seed).unwrap();
            assert!(total_variation(&blur).unwrap() < total_variation(&sharp).unwrap());
            let (blur, sharp) = synth_pair(&BlurSpec::motion(7.0, 0.6, 0.0), 32, seed).unwrap();
            assert!(total_variation(&blur).unwrap() < total_variation(&sharp).unwrap());
        }
    }
}
