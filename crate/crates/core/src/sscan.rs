//! Selective state space scan with zero-order-hold discretization.
//!
//! For a diagonal negative `A` the continuous system `h' = A h + B x` is
//! discretized per step as `Abar = exp(delta * A)` and
//! `Bbar = (exp(delta * A) - 1) / (delta * A) * delta * B`, after which the
//! recurrence `h_t = Abar h_{t-1} + Bbar x_t`, `y_t = C h_t + D x_t` runs along
//! the sequence. `B` and `C` are shared by all inner channels at a timestep.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Below this `|delta * A|` the `Bbar` coefficient uses its series expansion.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Learnable, input-independent part of the scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `log(-A)`, shape `[Cinner, N]`.
    pub a_log: Tensor,
    /// Skip coefficients, shape `[Cinner]`.
    pub d: Tensor,
}

impl SsmParams {
    /// `-A` spans `1..=N` in every channel; `D` starts at one.
    pub fn init(channels: usize, state_dim: usize) -> Self {
        Self {
            a_log: Tensor::from_fn([channels, state_dim], |i| ((i % state_dim) as f64 + 1.0).ln()),
            d: Tensor::ones([channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The diagonal state matrix `A = -exp(a_log)`, strictly negative.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }
}

/// Input-dependent part of the scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanInputs {
    /// `[L, Cinner]`
    pub x: Tensor,
    /// Positive step sizes, `[L, Cinner]`.
    pub delta: Tensor,
    /// `[L, N]`
    pub b: Tensor,
    /// `[L, N]`
    pub c: Tensor,
}

/// Hidden state `h`, shape `[Cinner, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Tensor,
}

/// `softplus(raw)`, the positive parameterization of the step size.
pub fn softplus_delta(raw: &Tensor) -> Tensor {
    ops::softplus(raw)
}

/// `delta * (exp(z) - 1) / z` with `z = delta * a`, the factor multiplying `B`.
#[inline]
fn input_coefficient(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    if z.abs() < SERIES_THRESHOLD {
        delta * (1.0 + 0.5 * z)
    } else {
        delta * z.exp_m1() / z
    }
}

/// Derivative of `(exp(z) - 1) / z`.
#[inline]
fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        // sum_{k>=1} k z^{k-1} / (k+1)!
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order-hold discretization of one diagonal entry.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("step size {delta} must be non-negative")));
    }
    Ok(((delta * a).exp(), input_coefficient(a, delta) * b))
}

/// One step of the affine recurrence `h -> a * h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    /// `self` applied after `first`: `(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)`.
    #[inline]
    pub fn after(self, first: Affine) -> Affine {
        Affine { a: self.a * first.a, b: self.a * first.b + self.b }
    }

    #[inline]
    pub fn apply(self, h: f64) -> f64 {
        self.a * h + self.b
    }
}

struct Dims {
    len: usize,
    channels: usize,
    state: usize,
}

fn check(params: &SsmParams, inputs: &ScanInputs) -> Result<Dims> {
    let (ci, n) = params.a_log.dims2()?;
    let (l, xc) = inputs.x.dims2()?;
    let fail = |what: &str, shape: &[usize]| {
        Err(dim_err(format!(
            "selective scan: {what} has shape {shape:?}, expected from x {:?} and A {:?}",
            inputs.x.shape(),
            params.a_log.shape()
        )))
    };
    if xc != ci {
        return fail("x", inputs.x.shape());
    }
    if inputs.delta.shape() != [l, ci] {
        return fail("delta", inputs.delta.shape());
    }
    if inputs.b.shape() != [l, n] {
        return fail("B", inputs.b.shape());
    }
    if inputs.c.shape() != [l, n] {
        return fail("C", inputs.c.shape());
    }
    if params.d.shape() != [ci] {
        return fail("D", params.d.shape());
    }
    if let Some(bad) = inputs.delta.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("step size {bad} must be non-negative")));
    }
    Ok(Dims { len: l, channels: ci, state: n })
}

/// Per-step affine maps of one timestep, `[Cinner * N]`.
fn step_maps(a: &[f64], inputs: &ScanInputs, t: usize, dims: &Dims, out: &mut [Affine]) {
    let (ci, n) = (dims.channels, dims.state);
    let xrow = &inputs.x.data()[t * ci..(t + 1) * ci];
    let drow = &inputs.delta.data()[t * ci..(t + 1) * ci];
    let brow = &inputs.b.data()[t * n..(t + 1) * n];
    for c in 0..ci {
        let delta = drow[c];
        for s in 0..n {
            let av = a[c * n + s];
            out[c * n + s] = Affine {
                a: (delta * av).exp(),
                b: input_coefficient(av, delta) * brow[s] * xrow[c],
            };
        }
    }
}

fn readout(h: &[f64], params: &SsmParams, inputs: &ScanInputs, t: usize, dims: &Dims, y: &mut [f64]) {
    let (ci, n) = (dims.channels, dims.state);
    let crow = &inputs.c.data()[t * n..(t + 1) * n];
    let xrow = &inputs.x.data()[t * ci..(t + 1) * ci];
    for c in 0..ci {
        let hs = &h[c * n..(c + 1) * n];
        y[c] = hs.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>() + params.d.data()[c] * xrow[c];
    }
}

/// Sequential reference scan from a zero initial state; also returns every
/// hidden state, `[L, Cinner, N]`.
pub fn selective_scan_states(params: &SsmParams, inputs: &ScanInputs) -> Result<(Tensor, Tensor)> {
    let dims = check(params, inputs)?;
    let (l, ci, n) = (dims.len, dims.channels, dims.state);
    let a = params.a();
    let mut maps = vec![Affine::IDENTITY; ci * n];
    let mut states = vec![0.0; l * ci * n];
    let mut y = vec![0.0; l * ci];
    let mut h = vec![0.0; ci * n];
    for t in 0..l {
        step_maps(a.data(), inputs, t, &dims, &mut maps);
        for (hv, m) in h.iter_mut().zip(&maps) {
            *hv = m.apply(*hv);
        }
        states[t * ci * n..(t + 1) * ci * n].copy_from_slice(&h);
        readout(&h, params, inputs, t, &dims, &mut y[t * ci..(t + 1) * ci]);
    }
    Ok((Tensor::from_parts(vec![l, ci], y), Tensor::from_parts(vec![l, ci, n], states)))
}

pub fn selective_scan_seq(params: &SsmParams, inputs: &ScanInputs) -> Result<Tensor> {
    selective_scan_states(params, inputs).map(|(y, _)| y)
}

/// Final hidden state after consuming the whole sequence.
pub fn final_state(params: &SsmParams, inputs: &ScanInputs) -> Result<ScanState> {
    let (_, states) = selective_scan_states(params, inputs)?;
    let [l, ci, n] = states.shape()[..] else { unreachable!() };
    let h = if l == 0 {
        vec![0.0; ci * n]
    } else {
        states.data()[(l - 1) * ci * n..].to_vec()
    };
    Ok(ScanState { h: Tensor::from_parts(vec![ci, n], h) })
}

/// Chunked scan: every chunk is reduced to its local states and cumulative
/// affine map in parallel, chunk boundary states are carried sequentially by
/// composing those maps, and each chunk then adds its carried-in state.
pub fn selective_scan_chunked(params: &SsmParams, inputs: &ScanInputs, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let dims = check(params, inputs)?;
    let (l, ci, n) = (dims.len, dims.channels, dims.state);
    let width = ci * n;
    let a = params.a();

    // Per chunk: local states (zero carry-in) and the running composed map.
    let chunks: Vec<(usize, usize)> = (0..l).step_by(chunk).map(|s| (s, (s + chunk).min(l))).collect();
    let locals: Vec<Vec<Affine>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut maps = vec![Affine::IDENTITY; width];
            let mut acc = vec![Affine::IDENTITY; width];
            let mut out = Vec::with_capacity((e - s) * width);
            for t in s..e {
                step_maps(a.data(), inputs, t, &dims, &mut maps);
                for (m_acc, &m) in acc.iter_mut().zip(&maps) {
                    *m_acc = if t == s { m } else { m.after(*m_acc) };
                }
                out.extend_from_slice(&acc);
            }
            out
        })
        .collect();

    let mut carry_in = Vec::with_capacity(chunks.len());
    let mut h = vec![0.0; width];
    for (local, &(s, e)) in locals.iter().zip(&chunks) {
        carry_in.push(h.clone());
        let last = &local[(e - s - 1) * width..];
        for (hv, m) in h.iter_mut().zip(last) {
            *hv = m.apply(*hv);
        }
    }

    let mut y = vec![0.0; l * ci];
    y.par_chunks_mut(chunk * ci)
        .zip(locals.par_iter().zip(carry_in.par_iter()))
        .enumerate()
        .for_each(|(j, (ys, (local, h0)))| {
            let s = j * chunk;
            let mut h = vec![0.0; width];
            for (k, yrow) in ys.chunks_mut(ci).enumerate() {
                let maps = &local[k * width..(k + 1) * width];
                for ((hv, m), &h0v) in h.iter_mut().zip(maps).zip(h0) {
                    *hv = m.apply(h0v);
                }
                readout(&h, params, inputs, s + k, &dims, yrow);
            }
        });
    Ok(Tensor::from_parts(vec![l, ci], y))
}

/// Gradients of the sequential scan.
pub struct ScanGrads {
    pub x: Tensor,
    pub delta: Tensor,
    pub a_log: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

pub fn selective_scan_backward(
    params: &SsmParams,
    inputs: &ScanInputs,
    states: &Tensor,
    grad: &Tensor,
) -> ScanGrads {
    let [l, ci, n] = states.shape()[..] else { unreachable!() };
    let a = params.a();
    let (ad, xd, dd, bd, cd, gd) = (
        a.data(),
        inputs.x.data(),
        inputs.delta.data(),
        inputs.b.data(),
        inputs.c.data(),
        grad.data(),
    );
    let hs = states.data();
    let mut gx = vec![0.0; l * ci];
    let mut gdelta = vec![0.0; l * ci];
    let mut ga = vec![0.0; ci * n];
    let mut gb = vec![0.0; l * n];
    let mut gc = vec![0.0; l * n];
    let mut gdd = vec![0.0; ci];
    let mut carry = vec![0.0; ci * n];
    let zeros = vec![0.0; ci * n];
    for t in (0..l).rev() {
        let h_t = &hs[t * ci * n..(t + 1) * ci * n];
        let h_prev = if t == 0 { &zeros[..] } else { &hs[(t - 1) * ci * n..t * ci * n] };
        for c in 0..ci {
            let gy = gd[t * ci + c];
            let x = xd[t * ci + c];
            let delta = dd[t * ci + c];
            gdd[c] += gy * x;
            let mut gxv = params.d.data()[c] * gy;
            let mut gdel = 0.0;
            for s in 0..n {
                let k = c * n + s;
                let gh = cd[t * n + s] * gy + carry[k];
                gc[t * n + s] += gy * h_t[k];
                let av = ad[k];
                let z = delta * av;
                let abar = z.exp();
                let coef = input_coefficient(av, delta);
                let bv = bd[t * n + s];
                gxv += gh * coef * bv;
                let g_abar = gh * h_prev[k];
                let g_bbar = gh * x;
                gdel += g_abar * av * abar + g_bbar * bv * abar;
                ga[k] += g_abar * delta * abar + g_bbar * bv * delta * delta * phi_prime(z);
                gb[t * n + s] += g_bbar * coef;
                carry[k] = abar * gh;
            }
            gx[t * ci + c] = gxv;
            gdelta[t * ci + c] = gdel;
        }
    }
    // A = -exp(a_log), so dA/da_log = A.
    let ga_log: Vec<f64> = ga.iter().zip(ad).map(|(g, a)| g * a).collect();
    ScanGrads {
        x: Tensor::from_parts(vec![l, ci], gx),
        delta: Tensor::from_parts(vec![l, ci], gdelta),
        a_log: Tensor::from_parts(vec![ci, n], ga_log),
        b: Tensor::from_parts(vec![l, n], gb),
        c: Tensor::from_parts(vec![l, n], gc),
        d: Tensor::from_parts(vec![ci], gdd),
    }
}

/// Records the sequential scan on `tape`.
pub fn selective_scan(
    tape: &mut Tape,
    x: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d: Var,
) -> Result<Var> {
    let params = SsmParams { a_log: tape.value(a_log).clone(), d: tape.value(d).clone() };
    let inputs = ScanInputs {
        x: tape.value(x).clone(),
        delta: tape.value(delta).clone(),
        b: tape.value(b).clone(),
        c: tape.value(c).clone(),
    };
    let (y, states) = selective_scan_states(&params, &inputs)?;
    if !tape.grad_enabled() {
        return Ok(tape.input(y));
    }
    Ok(tape.record(
        y,
        &[x, delta, a_log, b, c, d],
        Box::new(move |g, _| {
            let gr = selective_scan_backward(&params, &inputs, &states, g);
            Ok(vec![gr.x, gr.delta, gr.a_log, gr.b, gr.c, gr.d])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_problem(l: usize, ci: usize, n: usize, seed: u64) -> (SsmParams, ScanInputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let params = SsmParams {
            a_log: Tensor::from_fn([ci, n], |_| u(-1.0, 1.5)),
            d: Tensor::from_fn([ci], |_| u(-1.0, 1.0)),
        };
        let inputs = ScanInputs {
            x: Tensor::from_fn([l, ci], |_| u(-1.0, 1.0)),
            delta: Tensor::from_fn([l, ci], |_| u(0.001, 0.5)),
            b: Tensor::from_fn([l, n], |_| u(-1.0, 1.0)),
            c: Tensor::from_fn([l, n], |_| u(-1.0, 1.0)),
        };
        (params, inputs)
    }

    #[test]
    fn softplus_examples() {
        let y = softplus_delta(&Tensor::new([3], vec![0.0, 20.0, -20.0]).unwrap());
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((y.data()[1] - 20.0).abs() < 1e-8);
        assert!(y.data()[2] > 0.0 && y.data()[2] < 1e-8);
    }

    #[test]
    fn zoh_examples() {
        let (ab, bb) = zoh_discretize(-1.0, 1.0, std::f64::consts::LN_2).unwrap();
        assert!((ab - 0.5).abs() < 1e-12 && (bb - 0.5).abs() < 1e-12);
        assert_eq!(zoh_discretize(-3.0, 2.0, 0.0).unwrap(), (1.0, 0.0));
        let (ab, bb) = zoh_discretize(0.0, 2.0, 0.3).unwrap();
        assert_eq!(ab, 1.0);
        assert!((bb - 0.6).abs() < 1e-15);
        assert!(matches!(zoh_discretize(-1.0, 1.0, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn series_branch_is_continuous() {
        // With a = -1 the coefficient is 1 - exp(-delta) on both sides.
        for delta in [0.99e-8f64, 1.01e-8] {
            let exact = delta - delta * delta / 2.0 + delta.powi(3) / 6.0;
            assert!((input_coefficient(-1.0, delta) - exact).abs() < 1e-22);
        }
    }

    #[test]
    fn phi_prime_branches_agree() {
        for z in [-0.0101f64, -0.0099, 0.0099, 0.0101] {
            let series = 0.5 + z / 3.0 + z * z / 8.0 + z.powi(3) / 30.0 + z.powi(4) / 144.0;
            assert!((phi_prime(z) - series).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (params, mut inputs) = random_problem(16, 3, 4, 1);
        inputs.x = Tensor::zeros([16, 3]);
        assert!(selective_scan_seq(&params, &inputs).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        // A = -ln 2 with delta = 1 gives Abar = 0.5; B chosen so Bbar = 1.
        let a = -std::f64::consts::LN_2;
        let b = 1.0 / input_coefficient(a, 1.0);
        let params = SsmParams { a_log: Tensor::new([1, 1], vec![(-a).ln()]).unwrap(), d: Tensor::zeros([1]) };
        let inputs = ScanInputs {
            x: Tensor::new([3, 1], vec![1.0, 0.0, 0.0]).unwrap(),
            delta: Tensor::ones([3, 1]),
            b: Tensor::full([3, 1], b),
            c: Tensor::ones([3, 1]),
        };
        let y = selective_scan_seq(&params, &inputs).unwrap();
        for (got, want) in y.data().iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn skip_path_isolation() {
        let (params, mut inputs) = random_problem(10, 4, 3, 2);
        inputs.c = Tensor::zeros([10, 3]);
        let y = selective_scan_seq(&params, &inputs).unwrap();
        for t in 0..10 {
            for c in 0..4 {
                assert_eq!(y.at(&[t, c]), params.d.data()[c] * inputs.x.at(&[t, c]));
            }
        }
    }

    #[test]
    fn chunked_matches_sequential() {
        let (params, inputs) = random_problem(100, 3, 4, 3);
        let seq = selective_scan_seq(&params, &inputs).unwrap();
        for chunk in [1, 2, 7, 64, 100, 1000] {
            let ch = selective_scan_chunked(&params, &inputs, chunk).unwrap();
            assert!(ch.max_abs_diff(&seq).unwrap() < 1e-12, "chunk {chunk}");
        }
        assert!(selective_scan_chunked(&params, &inputs, 100).unwrap().bit_eq(&seq));
        assert!(selective_scan_chunked(&params, &inputs, 0).is_err());
    }

    #[test]
    fn long_random_chunked_case() {
        let (params, inputs) = random_problem(1024, 8, 4, 4);
        let seq = selective_scan_seq(&params, &inputs).unwrap();
        let ch = selective_scan_chunked(&params, &inputs, 64).unwrap();
        assert!(ch.max_abs_diff(&seq).unwrap() < 1e-10);
    }

    #[test]
    fn states_are_bounded() {
        let (params, inputs) = random_problem(500, 4, 4, 5);
        let (_, states) = selective_scan_states(&params, &inputs).unwrap();
        let a = params.a();
        let mut max_abar: f64 = 0.0;
        let mut max_drive: f64 = 0.0;
        for t in 0..500 {
            for c in 0..4 {
                for s in 0..4 {
                    let (ab, bb) =
                        zoh_discretize(a.at(&[c, s]), inputs.b.at(&[t, s]), inputs.delta.at(&[t, c])).unwrap();
                    assert!(ab > 0.0 && ab < 1.0);
                    max_abar = max_abar.max(ab);
                    max_drive = max_drive.max((bb * inputs.x.at(&[t, c])).abs());
                }
            }
        }
        assert!(states.max_abs() <= max_drive / (1.0 - max_abar) + 1e-12);
    }

    #[test]
    fn causality_under_future_perturbation() {
        let (params, inputs) = random_problem(40, 3, 4, 6);
        let y = selective_scan_seq(&params, &inputs).unwrap();
        let cut = 25;
        let mut pert = inputs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in cut + 1..40 {
            for c in 0..3 {
                pert.x.data_mut()[t * 3 + c] += rng.random_range(-1.0..1.0);
                pert.delta.data_mut()[t * 3 + c] *= 2.0;
            }
            for s in 0..4 {
                pert.b.data_mut()[t * 4 + s] += 0.5;
                pert.c.data_mut()[t * 4 + s] -= 0.5;
            }
        }
        let y2 = selective_scan_seq(&params, &pert).unwrap();
        assert_eq!(&y.data()[..(cut + 1) * 3], &y2.data()[..(cut + 1) * 3]);
        assert_ne!(&y.data()[(cut + 1) * 3..], &y2.data()[(cut + 1) * 3..]);
    }

    #[test]
    fn linear_in_c() {
        let (params, inputs) = random_problem(30, 2, 3, 8);
        let skip = inputs.x.mul(&Tensor::from_fn([30, 2], |i| params.d.data()[i % 2])).unwrap();
        let base = selective_scan_seq(&params, &inputs).unwrap().sub(&skip).unwrap();
        let mut scaled = inputs.clone();
        scaled.c = scaled.c.scale(-2.5);
        let y = selective_scan_seq(&params, &scaled).unwrap().sub(&skip).unwrap();
        assert!(y.max_abs_diff(&base.scale(-2.5)).unwrap() < 1e-12);
    }

    #[test]
    fn final_state_matches_last_step() {
        let (params, inputs) = random_problem(12, 2, 3, 9);
        let st = final_state(&params, &inputs).unwrap();
        let (_, states) = selective_scan_states(&params, &inputs).unwrap();
        assert_eq!(st.h.data(), &states.data()[11 * 6..]);
    }

    #[test]
    fn scan_gradients_pass_finite_differences() {
        let (params, inputs) = random_problem(9, 3, 2, 10);
        let mut store = ParamStore::new();
        store.insert("x".into(), inputs.x.clone());
        store.insert("delta".into(), inputs.delta.clone());
        store.insert("a_log".into(), params.a_log.clone());
        store.insert("b".into(), inputs.b.clone());
        store.insert("c".into(), inputs.c.clone());
        store.insert("d".into(), params.d.clone());
        let weights = Tensor::from_fn([9, 3], |i| ((i * 7) % 5) as f64 - 2.0);
        let f = |tape: &mut Tape, p: &ParamStore| {
            let v: Vec<Var> = ["x", "delta", "a_log", "b", "c", "d"].iter().map(|k| tape.param(*k, &p[*k])).collect();
            let y = selective_scan(tape, v[0], v[1], v[2], v[3], v[4], v[5])?;
            let w = tape.input(weights.clone());
            let yw = tape.mul(y, w)?;
            Ok(tape.sum(yw))
        };
        let report = grad_check(f, &store, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
