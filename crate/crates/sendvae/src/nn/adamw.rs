//! AdamW with decoupled weight decay, optional global-norm gradient clipping,
//! and an exponential moving average of the parameters.

use super::ParamStore;
use crate::graph::Real;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

pub struct AdamW<F: Real> {
    pub cfg: OptimizerConfig,
    pub step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore<F>) -> Self {
        let m = store.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        let v = store.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// One optimizer step; `grads` must align with the store's entry order.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[ArrayD<F>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter mismatch");
        self.step += 1;
        let t = self.step as i32;

        let clip_scale = if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for gr in grads {
                for &x in gr.iter() {
                    let v = x.as_f64();
                    sq += v * v;
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.grad_clip {
                self.cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bias2 = F::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr = F::from_f64(self.cfg.learning_rate);
        let eps = F::from_f64(self.cfg.eps);
        let wd = F::from_f64(self.cfg.weight_decay);
        let clip = F::from_f64(clip_scale);

        for (i, (_, param)) in store.entries_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(&grads[i])
                .for_each(|p, m, v, &graw| {
                    let gr = graw * clip;
                    *m = b1 * *m + (one - b1) * gr;
                    *v = b2 * *v + (one - b2) * gr * gr;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }

    /// Optimizer state tensors for checkpointing, in entry order.
    pub fn state_tensors(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// Exponential moving average over a parameter store.
pub struct Ema<F: Real> {
    pub decay: f64,
    pub params: ParamStore<F>,
}

impl<F: Real> Ema<F> {
    pub fn new(decay: f64, init: &ParamStore<F>) -> Self {
        Ema {
            decay,
            params: init.clone(),
        }
    }

    /// `ema <- decay * ema + (1 - decay) * params`
    pub fn update(&mut self, params: &ParamStore<F>) {
        let d = F::from_f64(self.decay);
        let one_minus = F::from_f64(1.0 - self.decay);
        for ((_, e), (_, p)) in self.params.entries_mut().zip(params.iter()) {
            ndarray::Zip::from(e).and(p).for_each(|e, &p| {
                *e = d * *e + one_minus * p;
            });
        }
    }
}
