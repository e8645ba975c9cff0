//! AdamW (decoupled weight decay) over a flat list of parameter matrices.

use serde::{Deserialize, Serialize};

use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|s| Mat::zeros(*s)).collect(),
            v: shapes.iter().map(|s| Mat::zeros(*s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Slots whose gradient is `None` only decay.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Option<Mat>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let c = self.cfg;
        let clip = match c.max_grad_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            p.mapv_inplace(|w| w - c.lr * c.weight_decay * w);
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = Mat::from_elem((1, 2), 5.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            max_grad_norm: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[(1, 2)]);
        for _ in 0..500 {
            let g = w.mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut [&mut w], &[Some(g)]);
        }
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-2), "{w}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Mat::zeros((1, 1));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.5,
                weight_decay: 0.0,
                ..Default::default()
            },
            &[(1, 1)],
        );
        opt.step(&mut [&mut w], &[Some(Mat::from_elem((1, 1), 3.0))]);
        assert!((w[[0, 0]] + 0.5).abs() < 1e-6);
    }
}
