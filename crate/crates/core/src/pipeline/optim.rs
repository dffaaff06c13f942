//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{dim_err, Error, Result};
use crate::layers::Parameters;
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl AdamState {
    /// Moments flattened into one store (for checkpoints).
    pub fn to_store(&self) -> ParamStore {
        let m = self.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn from_store(store: &ParamStore, step: u64) -> Result<Self> {
        let mut state = AdamState { step, ..Default::default() };
        for (k, t) in store {
            if let Some(name) = k.strip_prefix(M_PREFIX) {
                state.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(V_PREFIX) {
                state.v.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Format(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        Ok(state)
    }
}

/// One AdamW update of every parameter in `params`:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut failure = None;
    params.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(g) = grads.get(&name) else {
            failure = Some(Error::Config(format!("no gradient for parameter `{name}`")));
            return;
        };
        if g.shape() != p.shape() {
            failure = Some(dim_err(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
            return;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            failure = Some(dim_err(format!("optimizer state of `{name}` does not match {:?}", p.shape())));
            return;
        }
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let update = (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
            *pv = *pv * decay - lr * update;
        }
    });
    failure.map_or(Ok(()), Err)
}

/// `lr_end + (lr_start - lr_end) (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Tensor {
        Tensor::new([1], vec![value]).unwrap()
    }

    fn grads(g: f64) -> Gradients {
        let mut tape = crate::tensor::Tape::new();
        let x = tape.param("", &single(0.0));
        let s = tape.scale(x, g);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_stationary() {
        let mut p = single(1.25);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &grads(0.0), &mut AdamState::default(), 1e-3, &cfg).unwrap();
        assert_eq!(p.item(), 1.25);
    }

    #[test]
    fn first_step_closed_form() {
        let (g, lr, x0) = (0.3, 1e-2, 0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = single(x0);
        adamw_step(&mut p, &grads(g), &mut AdamState::default(), lr, &cfg).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction.
        let want = x0 - lr * g / (g.abs() + cfg.eps);
        assert!((p.item() - want).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let (lr, wd) = (1e-2, 0.1);
        let mut p = single(2.0);
        let cfg = AdamWConfig { weight_decay: wd, ..Default::default() };
        adamw_step(&mut p, &grads(0.0), &mut AdamState::default(), lr, &cfg).unwrap();
        assert_eq!(p.item(), 2.0 * (1.0 - lr * wd));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(1.0);
        let empty = Gradients::default();
        assert!(adamw_step(&mut p, &empty, &mut AdamState::default(), 1e-3, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn state_store_round_trip() {
        let mut p = single(1.0);
        let mut st = AdamState::default();
        adamw_step(&mut p, &grads(0.5), &mut st, 1e-3, &AdamWConfig::default()).unwrap();
        let back = AdamState::from_store(&st.to_store(), st.step).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn cosine_schedule() {
        let (a, b) = (1e-3, 1e-7);
        assert_eq!(cosine_lr(0, 100, a, b), a);
        assert!((cosine_lr(100, 100, a, b) - b).abs() < 1e-20);
        assert!((cosine_lr(50, 100, a, b) - (a + b) / 2.0).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(t, 100, a, b)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
