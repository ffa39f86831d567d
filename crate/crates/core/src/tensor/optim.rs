use serde::{Deserialize, Serialize};

use super::ParamSet;

/// Adam hyper-parameters (bias-corrected).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Exponential learning-rate decay from `initial` to `last` over `steps`, then held.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpDecay {
    pub initial: f64,
    pub last: f64,
    pub steps: u64,
}

impl ExpDecay {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            last: lr,
            steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.steps == 0 || self.initial == self.last {
            return self.initial;
        }
        let t = (step as f64 / self.steps as f64).min(1.0);
        self.initial * (self.last / self.initial).powf(t)
    }
}

/// First/second moment state for one flat parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, param: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        if self.m.len() != param.len() {
            self.m.resize(param.len(), 0.0);
            self.v.resize(param.len(), 0.0);
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }

    /// Re-indexes per-row moments after the owning array was restructured.
    /// `None` rows start with zero moments.
    pub fn remap_rows(&mut self, mapping: &[Option<usize>], row: usize) {
        let pick = |src: &[f64]| {
            let mut out = Vec::with_capacity(mapping.len() * row);
            for m in mapping {
                match m {
                    Some(i) if (i + 1) * row <= src.len() => out.extend_from_slice(&src[i * row..(i + 1) * row]),
                    _ => out.extend(std::iter::repeat_n(0.0, row)),
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// Adam over every tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            slots: params.tensors().iter().map(|t| AdamSlot::new(t.numel())).collect(),
        }
    }

    /// Applies one update; tensors whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], lr: f64) {
        for ((t, slot), g) in params.tensors_mut().iter_mut().zip(&mut self.slots).zip(grads) {
            if let Some(g) = g {
                slot.update(t.data_mut(), g, lr, &self.config);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamSlot::new(2);
        let mut p = vec![1.0, -1.0];
        s.update(&mut p, &[0.5, -2.0], 0.1, &AdamConfig::default());
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_hits_endpoints() {
        let d = ExpDecay {
            initial: 5e-3,
            last: 5e-5,
            steps: 100,
        };
        assert_eq!(d.at(0), 5e-3);
        assert!((d.at(100) - 5e-5).abs() < 1e-18);
        assert!((d.at(50) - 5e-4).abs() < 1e-12);
        assert!((d.at(1000) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn remap_keeps_and_zeroes_rows() {
        let mut s = AdamSlot {
            m: vec![1.0, 2.0, 3.0, 4.0],
            v: vec![5.0, 6.0, 7.0, 8.0],
            t: 3,
        };
        s.remap_rows(&[Some(1), None, Some(0)], 2);
        assert_eq!(s.m, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(s.v, vec![7.0, 8.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
