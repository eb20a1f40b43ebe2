use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over named parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step. Parameters without a gradient entry are untouched;
    /// a gradient for an unknown parameter is a lookup error.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *x -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
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
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..2000 {
            let x = p.get("x").unwrap().item();
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), Tensor::scalar(2.0 * (x - 0.5)));
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.get("x").unwrap().item() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn unknown_gradient_is_lookup_error() {
        let mut p = ParamSet::new();
        let mut g = BTreeMap::new();
        g.insert("y".to_string(), Tensor::scalar(1.0));
        assert!(Adam::new(AdamConfig::default()).step(&mut p, &g).is_err());
    }
}
