//! The efficient visual scan block and the EVSS module built around it.
//!
//! EVS block, on a feature map already in scan orientation:
//!
//! ```text
//! s        = flatten(G)                       [L, C]
//! X1r, X2  = split(Linear(s))                 [L, Ci] each
//! X1       = gelu(dw3x3(X1r on G's grid))
//! Δr,Br,Cr = split(Linear(X1))                widths Ci, N, N
//! Δ        = softplus(dconv7(Δr) + bias),  B = dconv7(Br),  C = dconv7(Cr)
//! Y        = scan(X1; Δ, B, C)
//! out      = Linear(norm(Y) * gelu(X2))       [L, C]
//! ```

use rand::Rng;

use crate::edffn::{edffn_forward, EdffnParams};
use crate::error::{Error, Result};
use crate::geometry::{flatten_var, transform_var, unflatten_var, ScanMode, ScheduleIndex};
use crate::layers::{join, trunc_normal, Linear, Norm, Parameters, INIT_STD};
use crate::sscan::{selective_scan, SsmParams};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Tape, Tensor, Var};

/// Width of the depth-wise convolutions that produce Δ, B and C.
pub const PARAM_CONV_WIDTH: usize = 7;

/// Initial step sizes are drawn log-uniformly from this range.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

#[derive(Clone, Debug, PartialEq)]
pub struct EvsBlockParams {
    /// `C -> 2 Ci`
    pub in_proj: Linear,
    /// `[Ci, 3, 3]`
    pub dw3x3: Tensor,
    /// `Ci -> Ci + 2N`
    pub param_proj: Linear,
    /// `[Ci, 7]`
    pub conv_delta: Tensor,
    /// `[N, 7]`
    pub conv_b: Tensor,
    /// `[N, 7]`
    pub conv_c: Tensor,
    /// Added to the convolved raw step before softplus, `[Ci]`.
    pub delta_bias: Tensor,
    pub ssm: SsmParams,
    pub norm: Norm,
    /// `Ci -> C`
    pub out_proj: Linear,
}

/// `softplus^-1(y) = y + ln(1 - exp(-y))`.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl EvsBlockParams {
    pub fn init<R: Rng>(channels: usize, expansion: usize, state_dim: usize, rng: &mut R) -> Self {
        let ci = expansion * channels;
        let (lo, hi) = DELTA_INIT_RANGE;
        let delta_bias = Tensor::from_fn([ci], |_| {
            let dt = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
            inverse_softplus(dt)
        });
        Self {
            in_proj: Linear::init(channels, 2 * ci, rng),
            dw3x3: trunc_normal([ci, 3, 3], INIT_STD, rng),
            param_proj: Linear::init(ci, ci + 2 * state_dim, rng),
            conv_delta: trunc_normal([ci, PARAM_CONV_WIDTH], INIT_STD, rng),
            conv_b: trunc_normal([state_dim, PARAM_CONV_WIDTH], INIT_STD, rng),
            conv_c: trunc_normal([state_dim, PARAM_CONV_WIDTH], INIT_STD, rng),
            delta_bias,
            ssm: SsmParams::init(ci, state_dim),
            norm: Norm::new(ci),
            out_proj: Linear::init(ci, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.out_proj.bias.len()
    }

    pub fn inner(&self) -> usize {
        self.ssm.channels()
    }

    pub fn state_dim(&self) -> usize {
        self.ssm.state_dim()
    }
}

impl Parameters for EvsBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        f(join(prefix, "dw3x3"), &self.dw3x3);
        self.param_proj.visit(&join(prefix, "param_proj"), f);
        f(join(prefix, "conv_delta"), &self.conv_delta);
        f(join(prefix, "conv_b"), &self.conv_b);
        f(join(prefix, "conv_c"), &self.conv_c);
        f(join(prefix, "delta_bias"), &self.delta_bias);
        f(join(prefix, "a_log"), &self.ssm.a_log);
        f(join(prefix, "d"), &self.ssm.d);
        self.norm.visit(&join(prefix, "norm"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        f(join(prefix, "dw3x3"), &mut self.dw3x3);
        self.param_proj.visit_mut(&join(prefix, "param_proj"), f);
        f(join(prefix, "conv_delta"), &mut self.conv_delta);
        f(join(prefix, "conv_b"), &mut self.conv_b);
        f(join(prefix, "conv_c"), &mut self.conv_c);
        f(join(prefix, "delta_bias"), &mut self.delta_bias);
        f(join(prefix, "a_log"), &mut self.ssm.a_log);
        f(join(prefix, "d"), &mut self.ssm.d);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

fn stage<T>(what: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Dimension(msg) => Error::Dimension(format!("EVS {what}: {msg}")),
        other => other,
    })
}

/// Runs the block on `g: [C, H', W']`, a feature map already transformed into
/// this block's scan orientation. The output has the same shape.
pub fn evs_block(tape: &mut Tape, p: &EvsBlockParams, prefix: &str, g: Var) -> Result<Var> {
    let (ci, n) = (p.inner(), p.state_dim());
    let (_, gh, gw) = stage("input", tape.value(g).dims3())?;
    let s = flatten_var(tape, g)?;
    let proj = stage("input projection", p.in_proj.forward(tape, &join(prefix, "in_proj"), s))?;
    let x1raw = tape.narrow(proj, 1, 0, ci)?;
    let x2 = tape.narrow(proj, 1, ci, ci)?;

    let x1img = unflatten_var(tape, x1raw, gh, gw)?;
    let k = tape.param(join(prefix, "dw3x3"), &p.dw3x3);
    let x1img = stage("3x3 depth-wise conv", tape.dwconv2d(x1img, k))?;
    let x1img = tape.gelu(x1img);
    let x1 = flatten_var(tape, x1img)?;

    let raw = stage("parameter projection", p.param_proj.forward(tape, &join(prefix, "param_proj"), x1))?;
    let delta_raw = tape.narrow(raw, 1, 0, ci)?;
    let b_raw = tape.narrow(raw, 1, ci, n)?;
    let c_raw = tape.narrow(raw, 1, ci + n, n)?;
    let kd = tape.param(join(prefix, "conv_delta"), &p.conv_delta);
    let kb = tape.param(join(prefix, "conv_b"), &p.conv_b);
    let kc = tape.param(join(prefix, "conv_c"), &p.conv_c);
    let delta = stage("delta conv", tape.dwconv1d(delta_raw, kd))?;
    let db = tape.param(join(prefix, "delta_bias"), &p.delta_bias);
    let delta = stage("delta bias", tape.add_bias(delta, db))?;
    let delta = tape.softplus(delta);
    let b = stage("B conv", tape.dwconv1d(b_raw, kb))?;
    let c = stage("C conv", tape.dwconv1d(c_raw, kc))?;

    let a_log = tape.param(join(prefix, "a_log"), &p.ssm.a_log);
    let d = tape.param(join(prefix, "d"), &p.ssm.d);
    let y = stage("scan", selective_scan(tape, x1, delta, a_log, b, c, d))?;

    let (gain, shift) = p.norm.bind(tape, &join(prefix, "norm"));
    let yn = stage("norm", tape.layer_norm(y, gain, shift, LAYER_NORM_EPS))?;
    let gate = tape.gelu(x2);
    let z = tape.mul(yn, gate)?;
    let out = stage("output projection", p.out_proj.forward(tape, &join(prefix, "out_proj"), z))?;
    unflatten_var(tape, out, gh, gw)
}

/// Transforms `x` into the scan orientation of module `i`, runs the block and
/// returns the result in the transformed orientation; the caller restores it.
pub fn evs_forward(
    tape: &mut Tape,
    p: &EvsBlockParams,
    prefix: &str,
    x: Var,
    i: ScheduleIndex,
    mode: ScanMode,
) -> Result<Var> {
    let g = transform_var(tape, x, i.kind(mode))?;
    evs_block(tape, p, prefix, g)
}

/// One EVS block and one feedforward block, each pre-normalized and residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EvssModuleParams {
    pub norm1: Norm,
    pub evs: EvsBlockParams,
    pub norm2: Norm,
    pub ffn: EdffnParams,
}

/// Construction sizes of one module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleDims {
    pub channels: usize,
    pub expansion: usize,
    pub state_dim: usize,
    pub ffn_ratio: usize,
    /// Resolution the screening weights are sized for.
    pub height: usize,
    pub width: usize,
}

impl EvssModuleParams {
    pub fn init<R: Rng>(dims: ModuleDims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(dims.channels),
            evs: EvsBlockParams::init(dims.channels, dims.expansion, dims.state_dim, rng),
            norm2: Norm::new(dims.channels),
            ffn: EdffnParams::init(dims.channels, dims.ffn_ratio, dims.height, dims.width, rng)?,
        })
    }
}

impl Parameters for EvssModuleParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.evs.visit(&join(prefix, "evs"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.evs.visit_mut(&join(prefix, "evs"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// `x1 = x + restore(EVS(norm(x)))`, `out = x1 + EDFFN(norm(x1))`.
pub fn evss_module_forward(
    tape: &mut Tape,
    p: &EvssModuleParams,
    prefix: &str,
    x: Var,
    i: ScheduleIndex,
    mode: ScanMode,
) -> Result<Var> {
    let kind = i.kind(mode);
    let (g1, s1) = p.norm1.bind(tape, &join(prefix, "norm1"));
    let n1 = tape.layer_norm_chw(x, g1, s1, LAYER_NORM_EPS)?;
    let e = evs_forward(tape, &p.evs, &join(prefix, "evs"), n1, i, mode)?;
    // Every transform is an involution, so restoring applies it again.
    let e = transform_var(tape, e, kind)?;
    let x1 = tape.add(x, e)?;
    let (g2, s2) = p.norm2.bind(tape, &join(prefix, "norm2"));
    let n2 = tape.layer_norm_chw(x1, g2, s2, LAYER_NORM_EPS)?;
    let f = edffn_forward(tape, &p.ffn, &join(prefix, "ffn"), n2)?;
    tape.add(x1, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sscan::zoh_discretize;
    use crate::tensor::{grad_check, ops, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(c: usize, h: usize, w: usize) -> ModuleDims {
        ModuleDims { channels: c, expansion: 2, state_dim: 3, ffn_ratio: 3, height: h, width: w }
    }

    /// Random module with weights large enough to make every path matter.
    pub(crate) fn random_module(d: ModuleDims, seed: u64) -> EvssModuleParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EvssModuleParams::init(d, &mut rng).unwrap();
        p.visit_mut("", &mut |name, t| {
            if name.ends_with("a_log") || name.ends_with("delta_bias") {
                return;
            }
            let src = t.clone();
            *t = Tensor::from_fn(src.shape().to_vec(), |k| src.data()[k] * 8.0 + rng.random_range(-0.2..0.2));
        });
        p
    }

    fn run_block(p: &EvsBlockParams, x: &Tensor, i: usize, mode: ScanMode) -> Tensor {
        let mut tape = Tape::no_grad();
        let xv = tape.input(x.clone());
        let y = evs_forward(&mut tape, p, "", xv, ScheduleIndex(i), mode).unwrap();
        tape.value(y).clone()
    }

    fn run_module(p: &EvssModuleParams, x: &Tensor, i: usize, mode: ScanMode) -> Tensor {
        let mut tape = Tape::no_grad();
        let xv = tape.input(x.clone());
        let y = evss_module_forward(&mut tape, p, "", xv, ScheduleIndex(i), mode).unwrap();
        tape.value(y).clone()
    }

    fn random_input(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn inverse_softplus_inverts() {
        for y in [1e-3, 0.05, 0.1, 2.0] {
            let x = inverse_softplus(y);
            assert!((ops::softplus(&Tensor::scalar(x)).item() - y).abs() < 1e-14);
        }
    }

    #[test]
    fn initial_steps_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EvsBlockParams::init(8, 2, 4, &mut rng);
        let dt = ops::softplus(&p.delta_bias);
        assert!(dt.data().iter().all(|&v| (1e-3 - 1e-12..=1e-1 + 1e-12).contains(&v)));
    }

    #[test]
    fn zero_output_projection_gives_zeros() {
        let mut p = random_module(dims(2, 4, 5), 1).evs;
        p.out_proj = Linear::zeroed(p.inner(), p.channels());
        let y = run_block(&p, &random_input([2, 4, 5], 2), 0, ScanMode::Evs);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_schedules_agree() {
        let p = random_module(dims(4, 4, 4), 3).evs;
        let x = random_input([4, 4, 4], 4);
        let one = run_block(&p, &x, 0, ScanMode::OneDirection);
        // Under FlipOnly the even modules do not transform.
        assert!(one.bit_eq(&run_block(&p, &x, 2, ScanMode::FlipOnly)));
        assert!(one.bit_eq(&run_block(&p, &x, 5, ScanMode::OneDirection)));
    }

    #[test]
    fn schedule_changes_the_output() {
        let p = random_module(dims(4, 4, 4), 5);
        let x = random_input([4, 4, 4], 6);
        let evs = run_module(&p, &x, 0, ScanMode::Evs);
        let one = run_module(&p, &x, 0, ScanMode::OneDirection);
        assert!(evs.max_abs_diff(&one).unwrap() > 1e-6);
    }

    #[test]
    fn single_pixel_matches_closed_form() {
        let (c, ci, n) = (2, 4, 3);
        let p = random_module(dims(c, 1, 1), 7).evs;
        let x = random_input([c, 1, 1], 8);
        let got = run_block(&p, &x, 0, ScanMode::Evs);

        let gelu = |v: f64| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let softplus = |v: f64| if v > 30.0 { v } else { v.exp().ln_1p() };
        let lin = |l: &Linear, v: &[f64]| -> Vec<f64> {
            let cout = l.bias.len();
            (0..cout)
                .map(|j| l.bias.data()[j] + v.iter().enumerate().map(|(i, xv)| xv * l.weight.at(&[i, j])).sum::<f64>())
                .collect()
        };
        let proj = lin(&p.in_proj, x.data());
        let x1: Vec<f64> = (0..ci).map(|k| gelu(proj[k] * p.dw3x3.at(&[k, 1, 1]))).collect();
        let x2 = &proj[ci..];
        let raw = lin(&p.param_proj, &x1);
        let centre = PARAM_CONV_WIDTH / 2;
        let delta: Vec<f64> =
            (0..ci).map(|k| softplus(raw[k] * p.conv_delta.at(&[k, centre]) + p.delta_bias.data()[k])).collect();
        let b: Vec<f64> = (0..n).map(|s| raw[ci + s] * p.conv_b.at(&[s, centre])).collect();
        let cc: Vec<f64> = (0..n).map(|s| raw[ci + n + s] * p.conv_c.at(&[s, centre])).collect();
        let a = p.ssm.a();
        let y: Vec<f64> = (0..ci)
            .map(|k| {
                let h: f64 = (0..n)
                    .map(|s| cc[s] * zoh_discretize(a.at(&[k, s]), b[s], delta[k]).unwrap().1 * x1[k])
                    .sum();
                h + p.ssm.d.data()[k] * x1[k]
            })
            .collect();
        let mean = y.iter().sum::<f64>() / ci as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ci as f64;
        let z: Vec<f64> = (0..ci)
            .map(|k| {
                let norm = (y[k] - mean) / (var + LAYER_NORM_EPS).sqrt();
                (norm * p.norm.gain.data()[k] + p.norm.shift.data()[k]) * gelu(x2[k])
            })
            .collect();
        let want = lin(&p.out_proj, &z);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn zero_projections_make_the_module_identity() {
        let mut p = random_module(dims(4, 4, 6), 9);
        p.evs.out_proj = Linear::zeroed(p.evs.inner(), 4);
        p.ffn.project = Linear::zeroed(p.ffn.hidden() / 2, 4);
        let x = random_input([4, 4, 6], 10);
        for i in 0..4 {
            assert!(run_module(&p, &x, i, ScanMode::Evs).bit_eq(&x));
        }
    }

    #[test]
    fn non_square_shapes_are_preserved() {
        let p = random_module(dims(2, 3, 5), 11);
        let x = random_input([2, 3, 5], 12);
        for i in 0..4 {
            assert_eq!(run_module(&p, &x, i, ScanMode::Evs).shape(), &[2, 3, 5]);
        }
    }

    #[test]
    fn shape_errors_name_the_stage() {
        let p = random_module(dims(2, 2, 2), 13).evs;
        let mut tape = Tape::no_grad();
        let xv = tape.input(Tensor::zeros([4, 2, 2]));
        let err = evs_forward(&mut tape, &p, "", xv, ScheduleIndex(0), ScanMode::Evs).unwrap_err();
        assert!(err.to_string().contains("input projection"), "{err}");
    }

    fn check_module(i: usize, h: usize, w: usize, seed: u64) {
        // Per-pixel norms over only two channels are close to a sign
        // function, which central differences resolve poorly; use four.
        let p = random_module(dims(4, h, w), seed);
        let mut store = p.to_store("m");
        store.insert("x".into(), random_input([4, h, w], seed + 1));
        let weights = random_input([4, h, w], seed + 2);
        let f = |tape: &mut Tape, s: &ParamStore| {
            let mut q = p.clone();
            q.load_store(s, "m")?;
            let xv = tape.param("x", &s["x"]);
            let y = evss_module_forward(tape, &q, "m", xv, ScheduleIndex(i), ScanMode::Evs)?;
            let wv = tape.input(weights.clone());
            let yw = tape.mul(y, wv)?;
            Ok(tape.sum(yw))
        };
        let report = grad_check(f, &store, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn module_gradients_transpose_step() {
        check_module(0, 3, 2, 20);
    }

    #[test]
    fn module_gradients_flip_step() {
        check_module(1, 2, 3, 30);
    }
}
