//! AdamW: Adam moments with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::dit::ModelParams;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok
            || ![self.lr, self.beta1, self.beta2, self.eps, self.weight_decay]
                .iter()
                .all(|v| v.is_finite())
        {
            return invalid(format!("invalid optimizer settings {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter group, in name order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut ms = self.m.named_mut();
        let mut vs = self.v.named_mut();
        let gs = grads.named();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g: &Array2<f64> = gs[i].1;
            let m = &mut *ms[i].1;
            let v = &mut *vs[i].1;
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.lr * (update + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = ModelConfig::toy(2, 2, 2, 2, 8, 2, 1);
        let mut p = ModelParams::init(&mut stream_rng(0, Stream::Init, 0), &cfg);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.dit.in_b.fill(3.0);
        g.dit.out_b.fill(-0.5);
        let conf = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(conf, &p);
        opt.step(&mut p, &g);
        let d = &before.dit.in_b - &p.dit.in_b;
        assert!(d.iter().all(|x| (x - 1e-3).abs() < 1e-9));
        let d = &before.dit.out_b - &p.dit.out_b;
        assert!(d.iter().all(|x| (x + 1e-3).abs() < 1e-9));
        assert_eq!(p.dit.blocks[0].wq, before.dit.blocks[0].wq);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = ModelConfig::toy(2, 2, 2, 2, 8, 2, 1);
        let mut p = ModelParams::init(&mut stream_rng(0, Stream::Init, 0), &cfg);
        let before = p.clone();
        let conf = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(conf, &p);
        let zeros = p.zeros_like();
        opt.step(&mut p, &zeros);
        let expect = &before.dit.in_w * (1.0 - 1e-3 * 0.1);
        assert!((&p.dit.in_w - &expect).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamWConfig {
            beta2: 1.0,
            ..AdamWConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamWConfig::default().validate().is_ok());
    }
}
