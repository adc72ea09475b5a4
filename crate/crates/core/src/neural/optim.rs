use ndarray::{Array2, Zip};

use super::params::ParamSet;
use super::tape::Gradients;

pub const WARMUP_INIT_LR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamConfig) -> AdamW {
        AdamW {
            config,
            m: params.values.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.values.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (i, g) in grads.0.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            Zip::from(&mut params.values[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + weight_decay * *p);
                });
        }
    }
}

/// Linear warmup from `init` to `peak` over `warmup_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub init: f64,
    pub peak: f64,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            return self.peak;
        }
        self.init + (self.peak - self.init) * step as f64 / self.warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn warmup_schedule() {
        let s = Schedule {
            init: WARMUP_INIT_LR,
            peak: 1e-3,
            warmup_steps: 10,
        };
        assert_eq!(s.lr(0), 1e-7);
        assert!(s.lr(5) > s.lr(4));
        assert_eq!(s.lr(10), 1e-3);
        assert_eq!(s.lr(1000), 1e-3);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::default();
        p.push("x", array![[3.0, -2.0]]);
        let mut opt = AdamW::new(
            &p,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let g = Gradients(vec![Some(p.values[0].mapv(|x| 2.0 * x))]);
            opt.step(&mut p, &g, 1e-2);
        }
        assert!(p.values[0].iter().all(|x| x.abs() < 1e-2), "{:?}", p.values[0]);
        let before = p.clone();
        opt.step(&mut p, &Gradients(vec![None]), 1e-2);
        assert_eq!(p, before);
    }
}
