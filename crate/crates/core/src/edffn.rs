//! Feedforward block with learnable frequency screening at its output.
//!
//! `x -> expand (1x1) -> depth-wise 3x3 -> split a|b -> a * gelu(b) ->
//! project (1x1) -> rfft2 -> per-bin real scaling -> irfft2`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, trunc_normal, Linear, Parameters, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EdffnParams {
    /// `C -> r*C`
    pub expand: Linear,
    /// `[r*C, 3, 3]`
    pub dw3x3: Tensor,
    /// `r*C/2 -> C`
    pub project: Linear,
    /// Real multipliers on the `rfft2` grid, `[C, H, W/2 + 1]`.
    pub w_quant: Tensor,
}

/// Spectrum extents `(H, W/2 + 1)` of an `H x W` signal.
pub fn spectrum_extents(h: usize, w: usize) -> (usize, usize) {
    (h, w / 2 + 1)
}

impl EdffnParams {
    /// `ratio * channels` must be even so the gate can split it in half.
    /// The screening weights start as ones (identity) for an `h x w` grid.
    pub fn init<R: Rng>(channels: usize, ratio: usize, h: usize, w: usize, rng: &mut R) -> Result<Self> {
        let hidden = ratio * channels;
        if hidden == 0 || !hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ffn ratio {ratio} times {channels} channels must be a positive even width"
            )));
        }
        let (hf, wh) = spectrum_extents(h, w);
        Ok(Self {
            expand: Linear::init(channels, hidden, rng),
            dw3x3: trunc_normal([hidden, 3, 3], INIT_STD, rng),
            project: Linear::init(hidden / 2, channels, rng),
            w_quant: Tensor::ones([channels, hf, wh]),
        })
    }

    pub fn channels(&self) -> usize {
        self.project.bias.len()
    }

    pub fn hidden(&self) -> usize {
        self.expand.bias.len()
    }
}

impl Parameters for EdffnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.expand.visit(&join(prefix, "expand"), f);
        f(join(prefix, "dw3x3"), &self.dw3x3);
        self.project.visit(&join(prefix, "project"), f);
        f(join(prefix, "w_quant"), &self.w_quant);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        f(join(prefix, "dw3x3"), &mut self.dw3x3);
        self.project.visit_mut(&join(prefix, "project"), f);
        f(join(prefix, "w_quant"), &mut self.w_quant);
    }
}

/// Expand, convolve, gate and project; the part of the block before screening.
pub fn gated_projection(tape: &mut Tape, p: &EdffnParams, prefix: &str, x: Var) -> Result<Var> {
    let hidden = p.hidden();
    let u = p.expand.forward_chw(tape, &join(prefix, "expand"), x)?;
    let k = tape.param(join(prefix, "dw3x3"), &p.dw3x3);
    let u = tape.dwconv2d(u, k)?;
    let a = tape.narrow(u, 0, 0, hidden / 2)?;
    let b = tape.narrow(u, 0, hidden / 2, hidden / 2)?;
    let gate = tape.gelu(b);
    let g = tape.mul(a, gate)?;
    p.project.forward_chw(tape, &join(prefix, "project"), g)
}

/// Scales the spectrum of `y: [C, H, W]` by `w_quant`, resampling the weights
/// bilinearly when they were trained for a different resolution.
pub fn screen(tape: &mut Tape, y: Var, w_quant: Var) -> Result<Var> {
    let [c, h, w] = tape.shape(y)[..] else {
        return Err(crate::error::dim_err(format!("screening expects [C, H, W], got {:?}", tape.shape(y))));
    };
    let (hf, wh) = spectrum_extents(h, w);
    let wq_shape = tape.shape(w_quant).to_vec();
    if wq_shape.len() != 3 || wq_shape[0] != c {
        return Err(Error::Config(format!(
            "screening weights {wq_shape:?} do not serve {c} channels"
        )));
    }
    let weights = if wq_shape[1..] == [hf, wh] {
        w_quant
    } else {
        tape.resample_bilinear(w_quant, hf, wh)?
    };
    let spec = tape.rfft2(y)?;
    let spec = tape.spectral_scale(spec, weights)?;
    tape.irfft2(spec, w)
}

pub fn edffn_forward(tape: &mut Tape, p: &EdffnParams, prefix: &str, x: Var) -> Result<Var> {
    let y0 = gated_projection(tape, p, prefix, x)?;
    let wq = tape.param(join(prefix, "w_quant"), &p.w_quant);
    screen(tape, y0, wq)
}

/// Where the frequency stage sits inside the feedforward block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// On the expanded hidden features (`r*C` channels).
    Mid,
    /// On the projected output (`C` channels).
    Tail,
}

/// Multiply-adds of the forward and inverse 2D FFTs in the frequency stage,
/// using `5 N log2 N` per channel and transform.
pub fn fft_cost(channels: usize, h: usize, w: usize, placement: Placement, ratio: usize) -> u64 {
    let width = match placement {
        Placement::Mid => ratio * channels,
        Placement::Tail => channels,
    };
    width as u64 * 2 * fft_cost_per_channel(h, w)
}

/// `round(5 N log2 N)` for one channel and one direction, `N = h * w`.
pub fn fft_cost_per_channel(h: usize, w: usize) -> u64 {
    let n = (h * w) as f64;
    (5.0 * n * n.log2()).round() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, c: usize, h: usize, w: usize) -> (EdffnParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EdffnParams::init(c, 3, h, w, &mut rng).unwrap();
        // Larger weights than the init so the test signals are not tiny.
        p.visit_mut("", &mut |_, t| {
            if t.shape().len() > 1 && t.max_abs() < 1.0 {
                *t = t.scale(25.0);
            }
        });
        let x = Tensor::from_fn([c, h, w], |_| rng.random_range(-1.0..1.0));
        (p, x)
    }

    fn run(p: &EdffnParams, x: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::no_grad();
        let xv = tape.input(x.clone());
        let y0 = gated_projection(&mut tape, p, "", xv).unwrap();
        let y = edffn_forward(&mut tape, p, "", xv).unwrap();
        (tape.value(y0).clone(), tape.value(y).clone())
    }

    #[test]
    fn odd_hidden_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EdffnParams::init(3, 3, 4, 4, &mut rng).is_err());
        assert!(EdffnParams::init(4, 3, 4, 4, &mut rng).is_ok());
    }

    #[test]
    fn ones_screening_is_identity() {
        let (p, x) = setup(1, 4, 6, 5);
        let (y0, y) = run(&p, &x);
        assert!(y0.max_abs() > 1e-3);
        assert!(y.max_abs_diff(&y0).unwrap() < 1e-10);
    }

    #[test]
    fn zero_screening_annihilates() {
        let (mut p, x) = setup(2, 2, 4, 4);
        p.w_quant = Tensor::zeros(p.w_quant.shape().to_vec());
        let (_, y) = run(&p, &x);
        assert!(y.max_abs() < 1e-15);
    }

    #[test]
    fn dc_only_screening_gives_channel_means() {
        let (mut p, x) = setup(3, 2, 4, 6);
        p.w_quant = Tensor::from_fn(p.w_quant.shape().to_vec(), |i| if i % (4 * 4) == 0 { 1.0 } else { 0.0 });
        let (y0, y) = run(&p, &x);
        for c in 0..2 {
            let plane = &y0.data()[c * 24..(c + 1) * 24];
            let mean = plane.iter().sum::<f64>() / 24.0;
            for v in &y.data()[c * 24..(c + 1) * 24] {
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn screening_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y0 = Tensor::from_fn([2, 5, 6], |_| rng.random_range(-1.0..1.0));
        let wq = Tensor::from_fn([2, 5, 4], |_| rng.random_range(-2.0..2.0));
        let apply = |t: &Tensor| {
            let mut tape = Tape::no_grad();
            let (a, b) = (tape.input(t.clone()), tape.input(wq.clone()));
            let y = screen(&mut tape, a, b).unwrap();
            tape.value(y).clone()
        };
        let lhs = apply(&y0.scale(-1.7));
        assert!(lhs.max_abs_diff(&apply(&y0).scale(-1.7)).unwrap() < 1e-12);
        assert!(lhs.all_finite());
    }

    #[test]
    fn resolution_change_resamples_weights() {
        let (p, _) = setup(5, 2, 4, 4);
        let x = Tensor::from_fn([2, 8, 6], |i| (i as f64 * 0.37).sin());
        let (y0, y) = run(&p, &x);
        // Resampling all-ones weights keeps them ones.
        assert!(y.max_abs_diff(&y0).unwrap() < 1e-10);
        let mut bad = p.clone();
        bad.w_quant = Tensor::ones([3, 4, 3]);
        let mut tape = Tape::no_grad();
        let xv = tape.input(x);
        assert!(matches!(edffn_forward(&mut tape, &bad, "", xv), Err(Error::Config(_))));
    }

    #[test]
    fn cost_model() {
        for (c, h, w) in [(48, 256, 256), (8, 32, 32), (3, 5, 7)] {
            let mid = fft_cost(c, h, w, Placement::Mid, 3);
            let tail = fft_cost(c, h, w, Placement::Tail, 3);
            assert_eq!(mid, 3 * tail);
            assert_eq!(fft_cost(2 * c, h, w, Placement::Tail, 3), 2 * tail);
            assert_eq!(fft_cost(c, h, w, Placement::Mid, 1), fft_cost(c, h, w, Placement::Tail, 1));
        }
        // 2 directions * 5 * 16 * log2(16)
        assert_eq!(fft_cost(1, 4, 4, Placement::Tail, 3), 640);
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let (mut p, x) = setup(6, 2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        p.w_quant = Tensor::from_fn(p.w_quant.shape().to_vec(), |_| rng.random_range(0.5..1.5));
        let mut store = p.to_store("ffn");
        store.insert("x".into(), x);
        let f = |tape: &mut Tape, s: &ParamStore| {
            let mut q = p.clone();
            q.load_store(s, "ffn")?;
            let xv = tape.param("x", &s["x"]);
            let y = edffn_forward(tape, &q, "ffn", xv)?;
            Ok(tape.sum_squares(y))
        };
        let report = grad_check(f, &store, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
