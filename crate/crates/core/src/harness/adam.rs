use crate::autodiff::{ParamGrads, ParamSet};
use crate::error::{Error, Result};

/// Bias-corrected Adam with one moment buffer pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }
}

/// One update of every parameter. Nothing is modified if any gradient is
/// missing, misshapen or non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::usage(format!(
            "Adam state covers {} parameters, gradients {}, model {}",
            state.m.len(),
            grads.len(),
            params.len()
        )));
    }
    for (id, p) in params.iter() {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::Internal(format!("no gradient for {:?}", p.name)))?;
        if g.shape() != p.value.shape() || state.m[id.0].len() != g.len() {
            return Err(Error::usage(format!(
                "gradient for {:?} has shape {:?}, parameter has {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient for {:?}",
                p.name
            )));
        }
    }

    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id).expect("checked above").data();
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let theta = params.value_mut(id).data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
