//! Adam with bias correction and the inverse-square-root warmup schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_container, write_container, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

pub const OPTIMIZER_MAGIC: &[u8; 7] = b"CSPADAM";

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    cfg: AdamConfig,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: vec![T::ZERO; n], v: vec![T::ZERO; n] }
    }

    /// One update of `params` against `grads` at learning rate `lr`.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.cfg.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::ONE - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::ONE - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

impl Adam<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, OPTIMIZER_MAGIC, &AdamHeader { cfg: self.cfg, t: self.t }, &[&self.m, &self.v])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut blocks): (AdamHeader, Vec<Vec<f32>>) = read_container(path, OPTIMIZER_MAGIC)?;
        if blocks.len() != 2 || blocks[0].len() != blocks[1].len() {
            return Err(Error::Format(format!("{}: expected two equal moment blocks", path.display())));
        }
        let v = blocks.pop().unwrap();
        let m = blocks.pop().unwrap();
        Ok(Self { cfg: h.cfg, t: h.t, m, v })
    }
}

/// `base · min(step^−½, step · warmup^−³ᐟ²) · warmup^½`, evaluated piecewise
/// so that `lr(warmup) == base` exactly.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return base / s.sqrt();
    }
    let w = warmup as f64;
    if s < w {
        base * s / w
    } else {
        base * (w / s).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_straight_line_reference() {
        let cfg = AdamConfig::default();
        let target: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let grad = |p: &[f64]| -> Vec<f64> { p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect() };
        let mut p = vec![0.5; 10];
        let mut adam = Adam::<f64>::new(10, cfg);
        // reference: scalar loop written from the textbook update
        let mut q = vec![0.5; 10];
        let (mut m, mut v) = (vec![0.0; 10], vec![0.0; 10]);
        for t in 1..=100 {
            let lr = learning_rate(0.01, 10, t);
            let g = grad(&p);
            adam.step(&mut p, &g, lr);
            let g = grad(&q);
            for i in 0..10 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.98 * v[i] + 0.02 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.98f64.powi(t as i32));
                q[i] -= lr * mh / (vh.sqrt() + 1e-9);
            }
        }
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn schedule_spot_values() {
        assert_eq!(learning_rate(5e-4, 500, 500), 5e-4);
        assert_eq!(learning_rate(5e-4, 500, 250), 2.5e-4);
        assert!((learning_rate(5e-4, 500, 2000) - 2.5e-4).abs() < 1e-15);
        for s in [1u64, 7, 499, 501, 10_000] {
            let closed = 5e-4 * (1.0 / (s as f64).sqrt()).min(s as f64 * 500f64.powf(-1.5)) * 500f64.sqrt();
            assert!((learning_rate(5e-4, 500, s) - closed).abs() < 1e-15);
        }
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Adam::<f32>::new(4, AdamConfig::default());
        let mut p = vec![1.0f32; 4];
        a.step(&mut p, &[0.1, -0.2, 0.3, 0.0], 0.01);
        a.save(&dir.path().join("o")).unwrap();
        assert_eq!(Adam::load(&dir.path().join("o")).unwrap(), a);
    }
}
