//! Central finite differences against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per tensor (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f` against central differences.
///
/// `f` must build its graph from the given store, registering each tensor it
/// differentiates through with [`Tape::param`] under its store key.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = f(&mut t, store)?;
        Ok(t.value(v).item())
    };
    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations at the same point gave {base:e} and {again:e}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (name, tensor) in params {
        let analytic = grads.get(name).ok_or_else(|| {
            Error::Config(format!("parameter `{name}` was never registered on the tape"))
        })?;
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < tensor.len() => sample(&mut rng, tensor.len(), k).into_vec(),
            _ => (0..tensor.len()).collect(),
        };
        for i in coords {
            let orig = tensor.data()[i];
            let slot = &mut store.get_mut(name).expect("cloned from params").data_mut()[i];
            *slot = orig + opts.step;
            let plus = eval(&store)?;
            store.get_mut(name).expect("cloned").data_mut()[i] = orig - opts.step;
            let minus = eval(&store)?;
            store.get_mut(name).expect("cloned").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn quadratic_matches_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn([7], |_| rng.random_range(-2.0..2.0));
        let params = store(&[("x", x.clone())]);
        let f = |tape: &mut Tape, p: &ParamStore| {
            let v = tape.param("x", &p["x"]);
            Ok(tape.sum_squares(v))
        };
        let mut tape = Tape::new();
        let loss = f(&mut tape, &params).unwrap();
        let g = tape.backward(loss).unwrap();
        for (a, b) in g.get("x").unwrap().data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
        let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let params = store(&[("x", Tensor::ones([3]))]);
        let f = |tape: &mut Tape, p: &ParamStore| {
            let _ = tape.param("x", &p["x"]);
            let c = tape.input(Tensor::scalar(4.2));
            Ok(tape.sum(c))
        };
        let mut tape = Tape::new();
        let loss = f(&mut tape, &params).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 0.0));
        let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let params = store(&[("x", Tensor::ones([1]))]);
        let f = |tape: &mut Tape, p: &ParamStore| {
            calls.set(calls.get() + 1);
            let v = tape.param("x", &p["x"]);
            let s = tape.sum(v);
            Ok(tape.scale(s, calls.get() as f64))
        };
        assert!(matches!(
            grad_check(f, &params, &GradCheckOptions::default()),
            Err(Error::Determinism(_))
        ));
    }
}
