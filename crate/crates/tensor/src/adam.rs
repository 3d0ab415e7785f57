use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Every trainable parameter of `store` must have a gradient of its shape.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (path, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(path)
                .ok_or_else(|| TensorError::Contract(format!("missing gradient for `{path}`")))?;
            if g.shape() != p.value.shape() {
                return Err(TensorError::Contract(format!(
                    "gradient for `{path}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let paths: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect();
        for path in paths {
            let g = grads[&path].data();
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let w = store.get_mut(&path)?.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `base · factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_trainable("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = single(1.5);
        let mut opt = Adam::new(1e-3);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..3 {
            opt.step(&mut s, &grads).unwrap();
        }
        assert_eq!(s.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        for g in [0.5, -3.0] {
            let mut s = single(0.0);
            let mut opt = Adam::new(1e-3);
            let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(g))]);
            opt.step(&mut s, &grads).unwrap();
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((s.get("p").unwrap().item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = single(0.0);
        let mut opt = Adam::new(1e-3);
        assert!(matches!(opt.step(&mut s, &BTreeMap::new()), Err(TensorError::Contract(_))));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn step_decay_schedule() {
        let s = StepDecay { base: 0.001, factor: 0.2, every: 6 };
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(5), 0.001);
        assert!((s.lr_at(6) - 0.0002).abs() < 1e-18);
        assert!((s.lr_at(12) - 0.00004).abs() < 1e-18);
        assert!((s.lr_at(18) - 0.000008).abs() < 1e-18);
    }
}
