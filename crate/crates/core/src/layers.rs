//! Parameter containers shared by the network blocks and the glue that maps
//! them to flat, hierarchically named stores.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// `prefix.name`, or `name` alone at the root.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tree of named tensors.
///
/// Names are produced by joining the caller's prefix with each field name, so
/// the same names are used for tape registration, optimizer state and
/// checkpoints.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn to_store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        self.visit(prefix, &mut |name, t| {
            store.insert(name, t.clone());
        });
        store
    }

    /// Overwrites every tensor from `store`; all names must be present with
    /// matching shapes.
    fn load_store(&mut self, store: &ParamStore, prefix: &str) -> Result<()> {
        let mut failure = None;
        self.visit_mut(prefix, &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match store.get(&name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    failure = Some(dim_err(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => failure = Some(Error::Format(format!("missing parameter `{name}`"))),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

impl Parameters for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

/// Truncated normal (resampled outside two standard deviations).
pub fn trunc_normal<R: Rng>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Dense layer; the weight is `[Cin, Cout]`. Also serves as a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self { weight: trunc_normal([cin, cout], INIT_STD, rng), bias: Tensor::zeros([cout]) }
    }

    pub fn zeroed(cin: usize, cout: usize) -> Self {
        Self { weight: Tensor::zeros([cin, cout]), bias: Tensor::zeros([cout]) }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> (Var, Var) {
        (
            tape.param(join(prefix, "weight"), &self.weight),
            tape.param(join(prefix, "bias"), &self.bias),
        )
    }

    /// `x @ W + b` over a `[L, Cin]` sequence.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let (w, b) = self.bind(tape, prefix);
        tape.linear(x, w, b)
    }

    /// Per-pixel projection of a `[Cin, H, W]` feature map.
    pub fn forward_chw(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let (w, b) = self.bind(tape, prefix);
        tape.linear_chw(x, w, b)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Dense `k×k` convolution with weight `[Cout, Cin, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn init<R: Rng>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self { weight: trunc_normal([cout, cin, k, k], INIT_STD, rng), bias: Tensor::zeros([cout]) }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(join(prefix, "weight"), &self.weight);
        let b = tape.param(join(prefix, "bias"), &self.bias);
        tape.conv2d(x, w, b)
    }
}

impl Parameters for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl Norm {
    pub fn new(channels: usize) -> Self {
        Self { gain: Tensor::ones([channels]), shift: Tensor::zeros([channels]) }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> (Var, Var) {
        (
            tape.param(join(prefix, "gain"), &self.gain),
            tape.param(join(prefix, "shift"), &self.shift),
        )
    }
}

impl Parameters for Norm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "shift"), &mut self.shift);
    }
}
