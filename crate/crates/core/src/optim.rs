//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor, plus the shared step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            slots: params
                .iter()
                .map(|p| AdamSlot {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                })
                .collect(),
        }
    }
}

/// One Adam update of `params` in place. The step counter advances even when
/// every gradient is zero.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(shape_err!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.slots.len()
        ));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.slots) {
        if p.shape() != g.shape() || p.shape() != s.m.shape() {
            return Err(shape_err!(
                "adam: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                s.m.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), s) in params.iter_mut().zip(grads).zip(state.slots.iter_mut()) {
        let (m, v) = (s.m.data_mut(), s.v.data_mut());
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Adam bound to the learnable entries of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    names: Vec<String>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let weights: Vec<(&str, &Tensor)> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(n, p)| (n, &p.value))
            .collect();
        let tensors: Vec<&Tensor> = weights.iter().map(|(_, t)| *t).collect();
        Adam {
            config,
            state: AdamState::zeros_like(&tensors),
            names: weights.iter().map(|(n, _)| n.to_string()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Applies the accumulated gradients (missing ones count as zero), then
    /// rounds the updated weights and moments through binary32 so that
    /// checkpoints capture the full training state.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.names.len());
        let mut grads: Vec<Tensor> = Vec::with_capacity(self.names.len());
        for n in &self.names {
            let p = store.param(n).expect("adam names come from the store");
            values.push(p.value.clone());
            grads.push(
                p.grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
            );
        }
        {
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut refs, &grefs, &mut self.state, &self.config, lr)?;
        }
        for (n, mut v) in self.names.iter().zip(values) {
            v.round_to_f32();
            store.set(n, v)?;
        }
        for s in &mut self.state.slots {
            s.m.round_to_f32();
            s.v.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.3, 0.4]).unwrap();
        let mut st = AdamState::zeros_like(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_params_and_moments() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::zeros_like(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 1e-3).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.slots[0].m.data(), &[0.0, 0.0]);
        assert_eq!(st.slots[0].v.data(), &[0.0, 0.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_magnitude() {
        // At t = 1: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        for g in [2.5, -0.01, 1e-6] {
            let mut p = Tensor::scalar(0.0);
            let gt = Tensor::scalar(g);
            let mut st = AdamState::zeros_like(&[&p]);
            adam_step(&mut [&mut p], &[&gt], &mut st, &cfg, 1e-3).unwrap();
            let expect = -1e-3 * g / (g.abs() + cfg.eps);
            assert!((p.item() - expect).abs() < 1e-18, "{g}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::zeros_like(&[&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default(), 1e-3).is_err());
    }
}
