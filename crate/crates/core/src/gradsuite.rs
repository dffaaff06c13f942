//! Finite-difference checks of every differentiable operation and model
//! component, grouped the way the `gradcheck` command exposes them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edffn::{edffn_forward, EdffnParams};
use crate::error::{Error, Result};
use crate::evs::{evs_forward, evss_module_forward, EvsBlockParams, EvssModuleParams, ModuleDims};
use crate::geometry::{flatten_var, transform_var, unflatten_var, ScanMode, ScheduleIndex, TransformKind};
use crate::layers::Parameters;
use crate::net::{forward, loss, NetParams, NetworkConfig};
use crate::sscan::selective_scan;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};

/// Relative-error bound for single operations and modules.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end reduced network.
pub const NET_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Tensor,
    Sscan,
    Evs,
    Edffn,
    Net,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Tensor, Group::Sscan, Group::Evs, Group::Edffn, Group::Net];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Tensor => "tensor",
            Group::Sscan => "sscan",
            Group::Evs => "evs",
            Group::Edffn => "edffn",
            Group::Net => "net",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub group: Group,
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

pub fn run(group: Group) -> Result<Vec<CaseResult>> {
    match group {
        Group::Tensor => tensor_cases(),
        Group::Sscan => sscan_cases(),
        Group::Evs => evs_cases(),
        Group::Edffn => edffn_cases(),
        Group::Net => net_cases(),
    }
}

pub fn run_all() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for g in Group::ALL {
        out.extend(run(g)?);
    }
    Ok(out)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `sum(y * w)` with fixed pseudo-random `w`, so every output element
/// contributes with a different weight.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = uniform(tape.shape(y), -1.0, 1.0, 0x5eed);
    let wv = tape.input(w);
    let yw = tape.mul(y, wv)?;
    Ok(tape.sum(yw))
}

/// Checks an operation of several tensor arguments, each registered as a
/// parameter in the order given.
fn op_case(
    name: &str,
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CaseResult> {
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("arg{i}")).collect();
    let store: ParamStore = names.iter().cloned().zip(inputs).collect();
    let f = |tape: &mut Tape, s: &ParamStore| {
        let vars: Vec<Var> = names.iter().map(|k| tape.param(k.clone(), &s[k])).collect();
        let y = op(tape, &vars)?;
        weighted_sum(tape, y)
    };
    let report = grad_check(f, &store, &GradCheckOptions::default())?;
    Ok(CaseResult { group: Group::Tensor, name: name.to_string(), report, tolerance: OP_TOLERANCE })
}

/// Checks a parameterized component against its parameters and input.
///
/// Parameters are registered as `p.<name>`, or without a prefix for the
/// whole network, whose forward pass names its own tensors.
#[allow(clippy::too_many_arguments)]
fn component_case<P: Parameters + Clone>(
    group: Group,
    name: &str,
    prefix: &str,
    params: &P,
    input: Tensor,
    tolerance: f64,
    opts: &GradCheckOptions,
    run: impl Fn(&mut Tape, &P, Var) -> Result<Var>,
) -> Result<CaseResult> {
    let mut store = params.to_store(prefix);
    store.insert("input".into(), input);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let mut q = params.clone();
        q.load_store(s, prefix)?;
        let x = tape.param("input", &s["input"]);
        let y = run(tape, &q, x)?;
        weighted_sum(tape, y)
    };
    let report = grad_check(f, &store, opts)?;
    Ok(CaseResult { group, name: name.to_string(), report, tolerance })
}

/// Replaces small initial weights by `scale * w + U(-jitter, jitter)` so
/// every path carries signal. Log-rates and step biases keep their values.
fn scramble<P: Parameters>(p: &mut P, scale: f64, jitter: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut("", &mut |name, t| {
        if name.ends_with("a_log") || name.ends_with("delta_bias") {
            return;
        }
        let src = t.clone();
        *t = Tensor::from_fn(src.shape().to_vec(), |k| src.data()[k] * scale + rng.random_range(-jitter..jitter));
    });
}

fn tensor_cases() -> Result<Vec<CaseResult>> {
    let u = |shape: &[usize], seed| uniform(shape, -1.0, 1.0, seed);
    let away_from_zero = uniform(&[4, 5], 0.1, 1.0, 30).zip_map(&u(&[4, 5], 31), |m, s| m.copysign(s))?;
    let mut cases = vec![
        op_case("linear", vec![u(&[5, 3], 1), u(&[3, 4], 2), u(&[4], 3)], |t, v| t.linear(v[0], v[1], v[2]))?,
        op_case("linear_chw", vec![u(&[3, 4, 5], 4), u(&[3, 2], 5), u(&[2], 6)], |t, v| {
            t.linear_chw(v[0], v[1], v[2])
        })?,
        op_case("conv2d", vec![u(&[2, 5, 4], 7), u(&[3, 2, 3, 3], 8), u(&[3], 9)], |t, v| {
            t.conv2d(v[0], v[1], v[2])
        })?,
        op_case("dwconv2d", vec![u(&[2, 5, 4], 10), u(&[2, 3, 3], 11)], |t, v| t.dwconv2d(v[0], v[1]))?,
        op_case("dwconv1d", vec![u(&[9, 3], 12), u(&[3, 7], 13)], |t, v| t.dwconv1d(v[0], v[1]))?,
        op_case("gelu", vec![uniform(&[24], -3.0, 3.0, 14)], |t, v| Ok(t.gelu(v[0])))?,
        op_case("softplus", vec![uniform(&[24], -4.0, 4.0, 15)], |t, v| Ok(t.softplus(v[0])))?,
        op_case("layer_norm", vec![u(&[5, 4], 16), u(&[4], 17), u(&[4], 18)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        })?,
        op_case("layer_norm_chw", vec![u(&[4, 3, 2], 19), u(&[4], 20), u(&[4], 21)], |t, v| {
            t.layer_norm_chw(v[0], v[1], v[2], 1e-5)
        })?,
        op_case("resample_bilinear_down", vec![u(&[2, 5, 7], 22)], |t, v| t.resample_bilinear(v[0], 3, 4))?,
        op_case("resample_bilinear_up", vec![u(&[2, 3, 4], 23)], |t, v| t.resample_bilinear(v[0], 6, 7))?,
        op_case("bilinear_resize_x2", vec![u(&[2, 3, 4], 24)], |t, v| t.bilinear_resize(v[0], 2.0))?,
        op_case("bilinear_resize_half", vec![u(&[2, 6, 4], 25)], |t, v| t.bilinear_resize(v[0], 0.5))?,
        op_case("narrow", vec![u(&[4, 3, 2], 26)], |t, v| t.narrow(v[0], 0, 1, 2))?,
        op_case("add", vec![u(&[3, 4], 27), u(&[3, 4], 28)], |t, v| t.add(v[0], v[1]))?,
        op_case("sub", vec![u(&[3, 4], 29), u(&[3, 4], 32)], |t, v| t.sub(v[0], v[1]))?,
        op_case("mul", vec![u(&[3, 4], 33), u(&[3, 4], 34)], |t, v| t.mul(v[0], v[1]))?,
        op_case("add_bias", vec![u(&[5, 3], 35), u(&[3], 36)], |t, v| t.add_bias(v[0], v[1]))?,
        op_case("scale", vec![u(&[6], 37)], |t, v| Ok(t.scale(v[0], -0.7)))?,
        op_case("abs", vec![away_from_zero], |t, v| Ok(t.abs(v[0])))?,
        op_case("sum", vec![u(&[2, 3], 38)], |t, v| Ok(t.sum(v[0])))?,
        op_case("mean", vec![u(&[2, 3], 39)], |t, v| Ok(t.mean(v[0])))?,
        op_case("sum_squares", vec![u(&[2, 3], 40)], |t, v| Ok(t.sum_squares(v[0])))?,
        op_case("reshape", vec![u(&[3, 4], 41)], |t, v| t.reshape(v[0], &[2, 6]))?,
        op_case("rfft2_even", vec![u(&[2, 4, 6], 42)], |t, v| t.rfft2(v[0]))?,
        op_case("rfft2_odd", vec![u(&[1, 3, 5], 43)], |t, v| t.rfft2(v[0]))?,
        op_case("spectral_scale", vec![u(&[2, 3, 3, 2], 44), u(&[2, 3, 3], 45)], |t, v| {
            t.spectral_scale(v[0], v[1])
        })?,
        op_case("transpose", vec![u(&[2, 3, 4], 46)], |t, v| transform_var(t, v[0], TransformKind::Transpose))?,
        op_case("flip_both", vec![u(&[2, 3, 4], 47)], |t, v| transform_var(t, v[0], TransformKind::FlipBoth))?,
        op_case("flatten", vec![u(&[2, 3, 4], 48)], |t, v| flatten_var(t, v[0]))?,
        op_case("unflatten", vec![u(&[12, 2], 49)], |t, v| unflatten_var(t, v[0], 3, 4))?,
        op_case("loss", vec![u(&[3, 4, 4], 50), u(&[3, 4, 4], 51)], |t, v| loss(t, v[0], v[1], 0.1))?,
    ];
    // The inverse transform is checked through a round trip so that its
    // input is a valid Hermitian half-spectrum.
    for (name, w) in [("irfft2_even", 6), ("irfft2_odd", 5)] {
        cases.push(op_case(name, vec![u(&[2, 4, w], 52 + w as u64)], move |t, v| {
            let spec = t.rfft2(v[0])?;
            let k = uniform(t.shape(spec), 0.5, 1.5, 60);
            let kv = t.input(k.clone().reshape(t.shape(spec).to_vec())?);
            let scaled = t.mul(spec, kv)?;
            t.irfft2(scaled, w)
        })?);
    }
    Ok(cases)
}

fn sscan_cases() -> Result<Vec<CaseResult>> {
    let (l, ci, n) = (9, 3, 4);
    let inputs = vec![
        uniform(&[l, ci], -1.0, 1.0, 1),
        uniform(&[l, ci], 0.001, 0.5, 2),
        uniform(&[ci, n], -1.0, 1.5, 3),
        uniform(&[l, n], -1.0, 1.0, 4),
        uniform(&[l, n], -1.0, 1.0, 5),
        uniform(&[ci], -1.0, 1.0, 6),
    ];
    let mut case = op_case("selective_scan", inputs, |t, v| selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5]))?;
    case.group = Group::Sscan;
    Ok(vec![case])
}

fn module_dims(h: usize, w: usize) -> ModuleDims {
    ModuleDims { channels: 4, expansion: 2, state_dim: 3, ffn_ratio: 3, height: h, width: w }
}

fn evs_cases() -> Result<Vec<CaseResult>> {
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut block = EvsBlockParams::init(4, 2, 3, &mut rng);
    scramble(&mut block, 8.0, 0.2, 71);
    for (i, name) in [(0, "evs_block_transpose"), (1, "evs_block_flip")] {
        let x = uniform(&[4, 3, 2], -1.0, 1.0, 72 + i as u64);
        out.push(component_case(Group::Evs, name, "p", &block, x, OP_TOLERANCE, &opts, |t, p, x| {
            evs_forward(t, p, "p", x, ScheduleIndex(i), ScanMode::Evs)
        })?);
    }
    let mut module = EvssModuleParams::init(module_dims(3, 2), &mut rng)?;
    scramble(&mut module, 8.0, 0.2, 80);
    for i in 0..4 {
        let x = uniform(&[4, 3, 2], -1.0, 1.0, 81 + i as u64);
        let name = format!("evss_module_step{i}");
        out.push(component_case(Group::Evs, &name, "p", &module, x, OP_TOLERANCE, &opts, |t, p, x| {
            evss_module_forward(t, p, "p", x, ScheduleIndex(i), ScanMode::Evs)
        })?);
    }
    Ok(out)
}

fn edffn_cases() -> Result<Vec<CaseResult>> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut p = EdffnParams::init(2, 3, 4, 3, &mut rng)?;
    scramble(&mut p, 8.0, 0.2, 91);
    p.w_quant = uniform(p.w_quant.shape(), 0.5, 1.5, 92);
    let run = |t: &mut Tape, p: &EdffnParams, x: Var| edffn_forward(t, p, "p", x);
    Ok(vec![
        component_case(Group::Edffn, "edffn", "p", &p, uniform(&[2, 4, 3], -1.0, 1.0, 93), OP_TOLERANCE, &opts, run)?,
        // Screening weights learned at another resolution are resampled.
        component_case(Group::Edffn, "edffn_resampled", "p", &p, uniform(&[2, 6, 5], -1.0, 1.0, 94), OP_TOLERANCE, &opts, run)?,
    ])
}

fn net_cases() -> Result<Vec<CaseResult>> {
    let config = NetworkConfig::reduced();
    let mut p = NetParams::init(&config, 8, 8, 100)?;
    scramble(&mut p, 4.0, 0.05, 101);
    // Every tensor is probed, but only at a few coordinates each.
    let opts = GradCheckOptions { max_coords: Some(3), seed: 102, ..Default::default() };
    let x = uniform(&[3, 8, 8], 0.0, 1.0, 103);
    let case = component_case(Group::Net, "reduced_network", "", &p, x, NET_TOLERANCE, &opts, |t, p, x| {
        forward(t, &config, p, x).map(|(out, _)| out)
    })?;
    Ok(vec![case])
}
