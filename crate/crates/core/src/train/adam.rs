use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Scalar;

pub const DEFAULT_LR: f64 = 1e-4;

/// Adam moments and step counter. Moments are held in f64 whatever the
/// parameter precision.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), vec![0.0; t.numel()]))
                .collect::<IndexMap<_, _>>()
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update from each parameter's stored gradient.
/// Gradients are cleared afterwards.
pub fn adam_step<T: Scalar>(params: &mut ModelParams<T>, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad.is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
        if state.m.get(name).map(Vec::len) != Some(t.numel()) {
            return Err(Error::Contract(format!("optimizer state does not match parameter {name}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, t) in params.iter_mut() {
        let grad = t.grad.take().expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad[i].to_f64_lossy();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *p = T::from_f64_lossy(p.to_f64_lossy() - state.lr * mh / (vh.sqrt() + state.eps));
        }
    }
    Ok(())
}
