//! Adam with bias correction and the cosine learning-rate schedule.

use std::collections::HashMap;

use crate::autodiff::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `lr(t) = lr0 · (1 + cos(π t / T)) / 2`, clamped to `t ∈ [0, T]`.
pub fn cosine_anneal(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam over a fixed parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<ParamId>,
    state: HashMap<ParamId, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: Vec<ParamId>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, params, state: HashMap::new() }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched but still count toward the shared step counter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(t));
        let c2 = T::one() - T::of(self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for &id in &self.params {
            let Some(grad) = grads.param(id) else { continue };
            let n = grad.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
            let value: &mut Tensor<T> = store.value_mut(id);
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
