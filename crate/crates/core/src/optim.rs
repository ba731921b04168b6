//! AdamW with decoupled weight decay. State exists only for trainable
//! parameters.

use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::config::ScheduleSection;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn from_schedule(s: &ScheduleSection) -> Self {
        Self {
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let state = store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, p)| {
                let z = Tensor::zeros(p.shape.as_slice());
                (id, Moments { m: z.clone(), v: z })
            })
            .collect();
        Self {
            config,
            state,
            steps: 0,
        }
    }

    /// Parameters holding optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`. Tracked parameters without a
    /// gradient are treated as having a zero gradient; gradients for
    /// untracked parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let by_id: BTreeMap<ParamId, &Tensor> = grads.iter().map(|(id, g)| (*id, g)).collect();
        for (&id, mo) in self.state.iter_mut() {
            let p = store.value_mut(id);
            match by_id.get(&id) {
                Some(g) => {
                    ndarray::Zip::from(&mut mo.m).and(&mut mo.v).and(*g).for_each(|m, v, &g| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    });
                }
                None => {
                    mo.m.mapv_inplace(|m| c.beta1 * m);
                    mo.v.mapv_inplace(|v| c.beta2 * v);
                }
            }
            ndarray::Zip::from(p).and(&mo.m).and(&mo.v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
