//! Reverse-mode differentiation by recording.
//!
//! A [`Tape`] owns every value produced during a forward pass. Each recorded
//! operation keeps the ids of its inputs and a closure mapping the output
//! gradient to input gradients. [`Tape::backward`] replays those closures in
//! reverse recording order and returns gradients for every registered parameter.

use std::collections::BTreeMap;

use super::fft::{irfft2_backward, rfft2_backward};
use super::{ops, ComplexGrid, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Maps the output gradient and the input values to one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Result<Vec<Tensor>> + Send>;

struct Node {
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// Adds `other` into `self`, inserting names not yet present.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(mine) => mine.accumulate(g)?,
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new(), params: Vec::new(), grad_enabled: true }
    }

    /// A tape that evaluates but records no gradient rules.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Records a leaf that receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None)
    }

    /// Records a named trainable leaf. Registering the same name twice
    /// accumulates both uses into one gradient.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Vec::new(), None);
        self.params.push((name.into(), v));
        v
    }

    /// Records an operation. `backward` is dropped when gradients are disabled.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        if self.grad_enabled {
            self.push(value, inputs.to_vec(), Some(backward))
        } else {
            self.push(value, Vec::new(), None)
        }
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { inputs, backward });
        Var(self.values.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every registered parameter.
    /// Parameters that do not influence `loss` receive exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Config("backward on a tape recorded without gradients".into()));
        }
        if self.values[loss.0].len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.values[loss.0].shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.backward {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
                let input_grads = rule(&g, &inputs)?;
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    match &mut grads[v.0] {
                        Some(acc) => acc.accumulate(&ig)?,
                        slot => *slot = Some(ig),
                    }
                }
            }
            if node.backward.is_none() {
                // Leaves keep their gradient for parameter collection.
                grads[i] = Some(g);
            }
        }
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape().to_vec()));
            match out.get_mut(name) {
                None => {
                    out.insert(name.clone(), g);
                }
                Some(acc) => Tensor::accumulate(acc, &g)?,
            }
        }
        Ok(Gradients(out))
    }

    // -----------------------------------------------------------------------
    // Recorded operations
    // -----------------------------------------------------------------------

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.record(
            y,
            &[x, weight, bias],
            Box::new(|g, ins| {
                let (gx, gw, gb) = ops::linear_backward(ins[0], ins[1], g);
                Ok(vec![gx, gw, gb])
            }),
        ))
    }

    /// 1x1 projection over the channel axis of a `[C, H, W]` map.
    pub fn linear_chw(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear_chw(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.record(
            y,
            &[x, weight, bias],
            Box::new(|g, ins| {
                let (gx, gw, gb) = ops::linear_chw_backward(ins[0], ins[1], g);
                Ok(vec![gx, gw, gb])
            }),
        ))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.record(
            y,
            &[x, weight, bias],
            Box::new(|g, ins| {
                let (gx, gw, gb) = ops::conv2d_backward(ins[0], ins[1], g);
                Ok(vec![gx, gw, gb])
            }),
        ))
    }

    pub fn dwconv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let y = ops::dwconv2d(self.value(x), self.value(kernel))?;
        Ok(self.record(
            y,
            &[x, kernel],
            Box::new(|g, ins| {
                let (gx, gk) = ops::dwconv2d_backward(ins[0], ins[1], g);
                Ok(vec![gx, gk])
            }),
        ))
    }

    pub fn dwconv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let y = ops::dwconv1d(self.value(x), self.value(kernel))?;
        Ok(self.record(
            y,
            &[x, kernel],
            Box::new(|g, ins| {
                let (gx, gk) = ops::dwconv1d_backward(ins[0], ins[1], g);
                Ok(vec![gx, gk])
            }),
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.record(y, &[x], Box::new(|g, ins| Ok(vec![ops::gelu_backward(ins[0], g)])))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = ops::softplus(self.value(x));
        self.record(y, &[x], Box::new(|g, ins| Ok(vec![ops::softplus_backward(ins[0], g)])))
    }

    /// Layer norm over the channels of `x: [L, C]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (y, stats) = ops::layer_norm(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.record(
            y,
            &[x, gain, shift],
            Box::new(move |g, ins| {
                let (gx, gg, gs) = ops::layer_norm_backward(&stats, ins[1], g);
                Ok(vec![gx, gg, gs])
            }),
        ))
    }

    /// Layer norm over the channels of `x: [C, H, W]`, per pixel.
    pub fn layer_norm_chw(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (y, stats) = ops::layer_norm_chw(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.record(
            y,
            &[x, gain, shift],
            Box::new(move |g, ins| {
                let (gx, gg, gs) = ops::layer_norm_chw_backward(&stats, ins[1], g);
                Ok(vec![gx, gg, gs])
            }),
        ))
    }

    pub fn resample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::resample_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.record(
            y,
            &[x],
            Box::new(|g, ins| Ok(vec![ops::resample_bilinear_backward(ins[0].shape(), g)])),
        ))
    }

    pub fn bilinear_resize(&mut self, x: Var, factor: f64) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        let (oh, ow) = ops::resize_extents(h, w, factor)?;
        self.resample_bilinear(x, oh, ow)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, ins| Ok(vec![ops::narrow_backward(ins[0].shape(), axis, start, g)])),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.record(y, &[a, b], Box::new(|g, _| Ok(vec![g.clone(), g.clone()]))))
    }

    /// Adds `bias: [C]` to every row of `x: [L, C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, c) = xv.dims2()?;
        if bv.shape() != [c] {
            return Err(dim_err(format!(
                "bias of shape {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.record(
            y,
            &[x, bias],
            Box::new(move |g, _| {
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Ok(vec![g.clone(), Tensor::from_parts(vec![c], gb)])
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.record(y, &[a, b], Box::new(|g, _| Ok(vec![g.clone(), g.scale(-1.0)]))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.record(
            y,
            &[a, b],
            Box::new(|g, ins| Ok(vec![g.mul(ins[1])?, g.mul(ins[0])?])),
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        self.record(y, &[x], Box::new(move |g, _| Ok(vec![g.scale(s)])))
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::abs);
        self.record(
            y,
            &[x],
            Box::new(|g, ins| {
                ins[0].zip_map(g, |v, gv| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 }).map(|t| vec![t])
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(
            y,
            &[x],
            Box::new(|g, ins| Ok(vec![Tensor::full(ins[0].shape().to_vec(), g.item())])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squares, a smooth scalar for gradient checks.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.record(
            y,
            &[x],
            Box::new(|g, ins| Ok(vec![ins[0].scale(2.0 * g.item())])),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(
            y,
            &[x],
            Box::new(|g, ins| Ok(vec![g.clone().reshape(ins[0].shape().to_vec())?])),
        ))
    }

    /// Real 2D DFT; the result is a `[C, H, W/2+1, 2]` tensor of `(re, im)` pairs.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let y = super::rfft2(self.value(x))?.into_tensor();
        Ok(self.record(
            y,
            &[x],
            Box::new(|g, ins| {
                let [_, h, w] = ins[0].shape()[..] else { unreachable!() };
                let grid = ComplexGrid::from_tensor(g.clone())?;
                Ok(vec![rfft2_backward(&grid, h, w)?])
            }),
        ))
    }

    /// Inverse of [`Tape::rfft2`] producing a signal of width `w`.
    pub fn irfft2(&mut self, spec: Var, w: usize) -> Result<Var> {
        let grid = ComplexGrid::from_tensor(self.value(spec).clone())?;
        let h = grid.shape()[1];
        let y = super::irfft2(&grid, h, w)?;
        Ok(self.record(
            y,
            &[spec],
            Box::new(move |g, _| Ok(vec![irfft2_backward(g, w)?.into_tensor()])),
        ))
    }

    /// Scales every complex bin of `spec: [C, H, Wh, 2]` by the real
    /// `weight: [C, H, Wh]`.
    pub fn spectral_scale(&mut self, spec: Var, weight: Var) -> Result<Var> {
        let (s, w) = (self.value(spec), self.value(weight));
        if s.rank() != 4 || s.shape()[..3] != *w.shape() || s.shape()[3] != 2 {
            return Err(Error::Config(format!(
                "spectral weights {:?} do not match spectrum {:?}",
                w.shape(),
                s.shape()
            )));
        }
        let y = Tensor::from_parts(
            s.shape().to_vec(),
            s.data()
                .chunks_exact(2)
                .zip(w.data())
                .flat_map(|(p, &k)| [p[0] * k, p[1] * k])
                .collect(),
        );
        Ok(self.record(
            y,
            &[spec, weight],
            Box::new(|g, ins| {
                let (s, w) = (ins[0], ins[1]);
                let gs = Tensor::from_parts(
                    s.shape().to_vec(),
                    g.data()
                        .chunks_exact(2)
                        .zip(w.data())
                        .flat_map(|(p, &k)| [p[0] * k, p[1] * k])
                        .collect(),
                );
                let gw = Tensor::from_parts(
                    w.shape().to_vec(),
                    g.data()
                        .chunks_exact(2)
                        .zip(s.data().chunks_exact(2))
                        .map(|(gp, sp)| gp[0] * sp[0] + gp[1] * sp[1])
                        .collect(),
                );
                Ok(vec![gs, gw])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_parameters_get_exact_zeros() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let _unused = tape.param("b", &Tensor::new([3], vec![4.0, 5.0, 6.0]).unwrap());
        let loss = tape.sum_squares(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new([1], vec![3.0]).unwrap());
        let b = tape.mul(a, a).unwrap();
        let c = tape.add(b, a).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::zeros([2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut tape = Tape::no_grad();
        let a = tape.param("a", &Tensor::zeros([1]));
        let s = tape.sum(a);
        assert!(tape.backward(s).is_err());
        assert_eq!(tape.value(s).item(), 0.0);
    }
}
