//! Adam optimiser and step-decay learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::param::Params;
use crate::scalar::Scalar;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers and step counter, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &Params<S>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![S::zero(); t.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of `params` using the raw `grads` slices.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut [S]],
    grads: &[&[S]],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(
            "adam_step",
            format!("{} params, {} grads, {} state buffers", params.len(), grads.len(), state.m.len()),
        );
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return shape_err("adam_step", format!("parameter {i}: {} values, {} grads", p.len(), g.len()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let step = S::from_f64(lr / bc1);
    let bc2_sqrt = S::from_f64(libm::sqrt(bc2));
    let eps = S::from_f64(cfg.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            p[j] = p[j] - step * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Adam over a whole [`Params`] store, reading each parameter's gradient buffer.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub state: AdamState<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Params<S>, config: AdamConfig) -> Self {
        Self { config, state: AdamState::new(params) }
    }

    pub fn step(&mut self, params: &mut Params<S>, lr: f64) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        let grads: Vec<Vec<S>> = ids
            .iter()
            .map(|&id| {
                let t = params.get(id);
                t.grad().map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); t.len()])
            })
            .collect();
        let mut values: Vec<Vec<S>> = ids.iter().map(|&id| params.get(id).data().to_vec()).collect();
        {
            let mut views: Vec<&mut [S]> = values.iter_mut().map(Vec::as_mut_slice).collect();
            let grad_views: Vec<&[S]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(&mut views, &grad_views, &mut self.state, lr, self.config)?;
        }
        for (id, v) in ids.into_iter().zip(values) {
            params.set_value(id, &v);
        }
        Ok(())
    }
}

/// Learning rate multiplied by `factor` once every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return self.base;
        }
        self.base * libm::pow(self.factor, (epoch / self.every) as f64)
    }
}
