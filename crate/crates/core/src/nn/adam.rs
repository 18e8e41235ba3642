use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Mat};
use super::params::{round_f32, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters are rounded to f32 precision afterwards.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = self.config;
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + c.eps);
            });
            round_f32(params.get_mut(id));
        }
    }
}

/// Exponential decay from `initial` to `floor`, reached at `decay_epochs`
/// and held afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-2,
            floor: 1e-6,
            decay_epochs: 400,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.decay_epochs == 0 || epoch >= self.decay_epochs {
            return if self.decay_epochs == 0 { self.initial } else { self.floor };
        }
        let frac = epoch as f64 / self.decay_epochs as f64;
        self.initial * (self.floor / self.initial).powf(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 1e-2);
        assert!((s.at(200) - 1e-4).abs() < 1e-12);
        assert_eq!(s.at(400), 1e-6);
        assert_eq!(s.at(1000), 1e-6);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Params::new();
        let id = p.filled("x", 1, 1, 3.0);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..500 {
            let mut g = Gradients::default();
            g.accumulate(id, p.get(id) * 2.0);
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.get(id)[[0, 0]].abs() < 0.05);
    }
}
