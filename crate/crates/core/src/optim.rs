//! Adam over complex parameters, step learning-rate schedule, and minibatch
//! planning.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ComplexGrid, ProbeStack};

/// Adam moments; complex parameters are two independent real channels, so
/// both moment vectors hold `2 * n` reals (re, im interleaved).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_complex: usize) -> Self {
        Self {
            m1: vec![0.0; 2 * n_complex],
            m2: vec![0.0; 2 * n_complex],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m1.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }

    /// Zero both moments and restart bias correction.
    pub fn reset(&mut self) {
        self.m1.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
        self.step_count = 0;
    }

    pub fn step_grid(&mut self, param: &mut ComplexGrid, grad: &ComplexGrid, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                context: "adam parameter vs gradient",
                expected: param.shape(),
                actual: grad.shape(),
            });
        }
        adam_step(&mut [param.data_mut()], &[grad.data()], self, lr)
    }

    pub fn step_probe(&mut self, probe: &mut ProbeStack, grad: &ProbeStack, lr: f64) -> Result<()> {
        if probe.shape() != grad.shape() || probe.mode_count() != grad.mode_count() {
            return Err(Error::Shape {
                context: "adam probe vs gradient",
                expected: probe.shape(),
                actual: grad.shape(),
            });
        }
        let mut params: Vec<&mut [Complex64]> = probe.modes_mut().iter_mut().map(|m| m.data_mut()).collect();
        let grads: Vec<&[Complex64]> = grad.modes().iter().map(|m| m.data()).collect();
        adam_step(&mut params, &grads, self, lr)
    }
}

/// One bias-corrected Adam update over a parameter set given as matching
/// lists of complex slices.
pub fn adam_step(
    params: &mut [&mut [Complex64]],
    grads: &[&[Complex64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let n: usize = params.iter().map(|p| p.len()).sum();
    let ng: usize = grads.iter().map(|g| g.len()).sum();
    if params.len() != grads.len()
        || n != ng
        || n != state.len()
        || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::Shape {
            context: "adam parameter set",
            expected: (state.len(), 1),
            actual: (n, ng),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::config("learning rate must be positive"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut j = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pz, gz) in p.iter_mut().zip(g.iter()) {
            let mut upd = [0.0; 2];
            for (ch, gv) in [gz.re, gz.im].into_iter().enumerate() {
                let m = &mut state.m1[j + ch];
                let v = &mut state.m2[j + ch];
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                upd[ch] = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            pz.re -= upd[0];
            pz.im -= upd[1];
            j += 2;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.005,
            step_size: 50,
            decay: 0.2,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.step_size == 0 || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

/// `base_lr * decay^floor(iteration / step_size)`.
pub fn lr_at(schedule: &LrSchedule, iteration: usize) -> f64 {
    schedule.base_lr * schedule.decay.powi((iteration / schedule.step_size) as i32)
}

/// Seeded random permutation of `0..k` cut into contiguous chunks.
pub fn minibatch_plan(k: usize, batch_size: usize, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::config("cannot plan minibatches over zero positions"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
