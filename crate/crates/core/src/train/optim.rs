use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &[Array2<f64>]) -> Self {
        let zeros: Vec<_> = like.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Bias-corrected Adam update, in place.
///
/// # Panics
/// If the parameter, gradient and moment lists do not line up.
pub fn adam_step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) {
    assert_eq!(params.len(), grads.len(), "adam_step: parameter/gradient count");
    assert_eq!(params.len(), state.m.len(), "adam_step: state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + hyper.eps);
        });
    }
}

/// `params - lr * grads`.
pub fn sgd_step(params: &[Array2<f64>], grads: &[Array2<f64>], lr: f64) -> Vec<Array2<f64>> {
    params.iter().zip(grads).map(|(p, g)| p - &(g * lr)).collect()
}
