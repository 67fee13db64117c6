use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{cast, Float, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over any number of stores. Moment buffers are keyed by
/// (store index, entry index), so the store list must keep its order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    t: u64,
    moments: Vec<Vec<Option<(ArrayD<F>, ArrayD<F>)>>>,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Frozen tensors and buffers are never touched, whatever their gradient holds.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<F>]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step: F = cast(c.lr / bc1);
        let (b1, b2, eps): (F, F, F) = (cast(c.beta1), cast(c.beta2), cast(c.eps));
        let inv_bc2: F = cast(1.0 / bc2);
        if self.moments.len() < stores.len() {
            self.moments.resize_with(stores.len(), Vec::new);
        }
        for (si, store) in stores.iter_mut().enumerate() {
            let slots = &mut self.moments[si];
            for (ei, e) in store.entries_mut().iter_mut().enumerate() {
                if slots.len() <= ei {
                    slots.resize_with(ei + 1, || None);
                }
                if !e.is_trainable() {
                    continue;
                }
                let (m, v) = slots[ei]
                    .get_or_insert_with(|| (ArrayD::zeros(e.value.raw_dim()), ArrayD::zeros(e.value.raw_dim())));
                Zip::from(&mut e.value)
                    .and(&e.grad)
                    .and(m)
                    .and(v)
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
                    });
            }
        }
    }
}
