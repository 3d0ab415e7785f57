//! Parameterized building blocks: linear maps, convolutions, batch norm.

use rand::Rng;

use crate::error::Result;
use crate::graph::{NormStats, Var};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches by construction")
}

/// `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub path: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(path: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            path: path.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    /// Uniform in ±1/√fan_in for weight and bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        store.insert_trainable(&self.weight_path(), uniform(rng, &[self.out_dim, self.in_dim], bound))?;
        if self.bias {
            store.insert_trainable(&self.bias_path(), uniform(rng, &[self.out_dim], bound))?;
        }
        Ok(())
    }

    pub fn forward(&self, b: &Binder<'_>, x: &Var) -> Result<Var> {
        let w = b.param(&self.weight_path())?;
        let bias = if self.bias { Some(b.param(&self.bias_path())?) } else { None };
        x.linear(&w, bias.as_ref())
    }
}

/// Same-padded convolution with one to three spatial axes.
#[derive(Debug, Clone)]
pub struct Conv {
    pub path: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<usize>,
}

impl Conv {
    pub fn new(path: impl Into<String>, cin: usize, cout: usize, kernel: &[usize]) -> Self {
        Self {
            path: path.into(),
            cin,
            cout,
            kernel: kernel.to_vec(),
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let fan_in = self.cin * self.kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut shape = vec![self.cout, self.cin];
        shape.extend_from_slice(&self.kernel);
        store.insert_trainable(&self.weight_path(), uniform(rng, &shape, bound))?;
        store.insert_trainable(&self.bias_path(), uniform(rng, &[self.cout], bound))?;
        Ok(())
    }

    pub fn forward(&self, b: &Binder<'_>, x: &Var) -> Result<Var> {
        let w = b.param(&self.weight_path())?;
        let bias = b.param(&self.bias_path())?;
        x.conv(&w, Some(&bias))
    }
}

/// Batch normalization over axis 1 of `[B, C, ...]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub path: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(path: impl Into<String>, channels: usize) -> Self {
        Self {
            path: path.into(),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn sub(&self, name: &str) -> String {
        format!("{}.{name}", self.path)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        store.insert_trainable(&self.sub("scale"), Tensor::full(&[c], 1.0))?;
        store.insert_trainable(&self.sub("shift"), Tensor::zeros(&[c]))?;
        store.insert_buffer(&self.sub("running_mean"), Tensor::zeros(&[c]))?;
        store.insert_buffer(&self.sub("running_var"), Tensor::full(&[c], 1.0))?;
        Ok(())
    }

    /// Batch statistics (and a queued running-stat update) in training mode,
    /// running statistics otherwise.
    pub fn forward(&self, b: &Binder<'_>, x: &Var) -> Result<Var> {
        let scale = b.param(&self.sub("scale"))?;
        let shift = b.param(&self.sub("shift"))?;
        let mean_path = self.sub("running_mean");
        let var_path = self.sub("running_var");
        let running_mean = b.buffer(&mean_path)?;
        let running_var = b.buffer(&var_path)?;
        if b.is_train() {
            let (y, stats) = x.batch_norm(&scale, &shift, NormStats::Batch { eps: self.eps })?;
            if let Some((mean, var)) = stats {
                let m = b.momentum_override().unwrap_or(self.momentum);
                let blend = |old: &Tensor, new: &[f64]| {
                    old.data().iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n).collect::<Vec<_>>()
                };
                b.update_buffer(&mean_path, Tensor::new(vec![self.channels], blend(running_mean, &mean))?);
                b.update_buffer(&var_path, Tensor::new(vec![self.channels], blend(running_var, &var))?);
            }
            Ok(y)
        } else {
            let stats = NormStats::Fixed {
                mean: running_mean.data(),
                var: running_var.data(),
                eps: self.eps,
            };
            Ok(x.batch_norm(&scale, &shift, stats)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;

    #[test]
    fn identity_linear_passes_input() {
        let mut s = ParamStore::new();
        let l = Linear::new("l", 3, 3);
        l.init(&mut s, &mut rand::rngs::StdRng::seed_from_u64(0)).unwrap();
        s.set("l.weight", Tensor::eye(3)).unwrap();
        s.set("l.bias", Tensor::zeros(&[3])).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &s, false);
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap());
        assert_eq!(l.forward(&b, &x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_weight_gives_bias_rows() {
        let mut s = ParamStore::new();
        let l = Linear::new("l", 2, 3);
        l.init(&mut s, &mut rand::rngs::StdRng::seed_from_u64(0)).unwrap();
        s.set("l.weight", Tensor::zeros(&[3, 2])).unwrap();
        s.set("l.bias", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &s, false);
        let x = g.leaf(Tensor::new(vec![2, 2], vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        assert_eq!(l.forward(&b, &x).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut s = ParamStore::new();
        let c = Conv::new("c", 2, 2, &[1, 1]);
        c.init(&mut s, &mut rand::rngs::StdRng::seed_from_u64(0)).unwrap();
        s.set("c.weight", Tensor::eye(2).reshaped(&[2, 2, 1, 1]).unwrap()).unwrap();
        s.set("c.bias", Tensor::zeros(&[2])).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &s, false);
        let data: Vec<f64> = (0..2 * 2 * 3 * 4).map(|v| v as f64 - 7.0).collect();
        let x = g.leaf(Tensor::new(vec![2, 2, 3, 4], data).unwrap());
        assert_eq!(c.forward(&b, &x).unwrap().data(), x.data());
    }

    #[test]
    fn batch_norm_running_stats_only_in_training() {
        let mut s = ParamStore::new();
        let bn = BatchNorm::new("bn", 1);
        bn.init(&mut s).unwrap();
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Graph::new();
        let eval = Binder::new(&g, &s, false);
        bn.forward(&eval, &g.leaf(x.clone())).unwrap();
        assert!(eval.take_buffer_updates().is_empty());
        let train = Binder::new(&g, &s, true);
        let y = bn.forward(&train, &g.leaf(x)).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let ups = train.take_buffer_updates();
        assert!((ups["bn.running_mean"].item() - 0.25).abs() < 1e-12);
        // unbiased var of 1..4 is 5/3
        assert!((ups["bn.running_var"].item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
