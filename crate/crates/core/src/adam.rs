//! Bias-corrected Adam over a list of flat parameter tensors.

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter tensor ("slot").
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new(config: AdamConfig, slot_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: slot_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// Applies one update to every slot. `params[i]` and `grads[i]` must have
    /// the length of slot `i`.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg("adam: slot count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::arg(format!("adam: slot {i} size mismatch")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let cast = |v: f64| F::from(v).expect("representable");
        let (b1, b2) = (cast(c.beta1), cast(c.beta2));
        let one = F::one();
        let t = self.step as i32;
        let corr1 = one - cast(c.beta1.powi(t));
        let corr2 = one - cast(c.beta2.powi(t));
        let lr = cast(c.lr);
        let eps = cast(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
