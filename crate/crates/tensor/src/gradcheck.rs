//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

fn scalar_of(v: &Var) -> Result<f64> {
    if v.value().len() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let s = v.value().item();
    if !s.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(s)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check(f: impl Fn(&Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(TensorError::Contract("eps must be positive".into()));
    }
    let g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&leaf)?;
    scalar_of(&out)?;
    let grads = out.backward()?;
    let analytic = grads.get(&leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::no_grad();
        scalar_of(&f(&g.leaf(t))?)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    /// `path[index]` of the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

/// Finite-difference check of a scalar function of every trainable
/// parameter in `store`, evaluated in eval mode (fixed normalization
/// statistics). With `per_param = Some(n)`, at most `n` seeded random
/// coordinates of each tensor are probed.
pub fn grad_check_params(
    store: &ParamStore,
    f: impl Fn(&Binder<'_>) -> Result<Var>,
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<ParamCheckReport> {
    let g = Graph::new();
    let binder = Binder::new(&g, store, false);
    let out = f(&binder)?;
    scalar_of(&out)?;
    let grads = binder.param_grads(&out.backward()?);
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::no_grad();
        let b = Binder::new(&g, s, false);
        scalar_of(&f(&b)?)
    };
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    let paths: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect();
    for path in paths {
        let n = store.get(&path)?.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(&path).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in coords {
            let orig = store.get(&path)?.data()[i];
            work.get_mut(&path)?.data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(&path)?.data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(&path)?.data_mut()[i] = orig;
            let e = rel_err(analytic[i], (fp - fm) / (2.0 * eps));
            report.coordinates += 1;
            if e >= report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{path}[{i}]");
            }
        }
    }
    Ok(report)
}
