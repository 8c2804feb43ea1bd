//! Adam optimizer.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Float>(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` may be `None` for parameters that received no
    /// gradient; their moments still decay.
    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data[j].f64());
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w = T::of(w.f64() - update);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for buf in [&self.m, &self.v] {
            for v in buf.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let n: usize = self.m.iter().map(Vec::len).sum();
        if bytes.len() != 16 * n {
            return Err(Error::Integrity(format!(
                "optimizer state holds {} bytes, expected {}",
                bytes.len(),
                16 * n
            )));
        }
        let mut chunks = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for buf in [&mut self.m, &mut self.v] {
            for v in buf.iter_mut().flatten() {
                *v = chunks.next().expect("length checked");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        let g = Some(Tensor::new(&[2], vec![0.3, -2.0]));
        adam.step(&mut p, &[g], 0.01);
        // bias-corrected first step is lr * sign(g)
        assert!((p.values()[0].data[0] - 0.99).abs() < 1e-7);
        assert!((p.values()[0].data[1] + 0.99).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::new(&[1], vec![3.0]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let w = p.values()[0].data[0];
            adam.step(&mut p, &[Some(Tensor::new(&[1], vec![2.0 * (w - 1.0)]))], 0.01);
        }
        assert!((p.values()[0].data[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn state_round_trip() {
        let mut p = ParamStore::<f32>::new();
        p.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let mut a = Adam::new(&p, AdamConfig::default());
        a.step(&mut p, &[Some(Tensor::new(&[3], vec![0.1, 0.2, 0.3]))], 1e-3);
        let mut b = Adam::new(&p, AdamConfig::default());
        b.load_bytes(&a.to_bytes()).unwrap();
        b.t = a.t;
        assert_eq!(a, b);
        assert!(b.load_bytes(&[0; 8]).is_err());
    }
}
