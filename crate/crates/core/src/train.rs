//! Optimization loop over frame pairs of one or more sequences.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sot_tensor::{Adam, Binder, Graph, ParamStore, StepDecay, Tensor};

use crate::config::RunConfig;
use crate::dataio::Sequence;
use crate::encoder::SamplingStarts;
use crate::error::{invalid, CoreError, Result};
use crate::model::Model;
use crate::supervision::{make_training_sample, total_loss, TrainingSample};

/// Batch-averaged loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cls_bev: f64,
    pub cls_z: f64,
    pub reg_bev: f64,
    pub reg_z: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:.6} total={:.6} cls_bev={:.6} cls_z={:.6} reg_bev={:.6} reg_z={:.6}",
            self.step, self.epoch, self.lr, self.total, self.cls_bev, self.cls_z, self.reg_bev, self.reg_z
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Frame pairs whose search region held no points.
    pub skipped: usize,
}

/// Loss terms and gradients of one sample in training mode.
pub struct SampleGrad {
    pub terms: [f64; 5],
    pub grads: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

pub fn sample_gradients(model: &Model, store: &ParamStore, cfg: &RunConfig, sample: &TrainingSample, starts: SamplingStarts) -> Result<SampleGrad> {
    let g = Graph::new();
    let b = Binder::new(&g, store, true);
    let heads = model.forward(&b, &sample.template, &sample.search, starts)?;
    let loss = total_loss(&heads, &sample.labels, &cfg.loss)?;
    let grads = loss.total.backward()?;
    Ok(SampleGrad {
        terms: [loss.total.value().item(), loss.cls_bev, loss.cls_z, loss.reg_bev, loss.reg_z],
        grads: b.param_grads(&grads),
        buffers: b.take_buffer_updates(),
    })
}

/// Eval-mode loss of `sample` with deterministic sampling.
pub fn eval_loss(model: &Model, store: &ParamStore, cfg: &RunConfig, sample: &TrainingSample) -> Result<f64> {
    let g = Graph::no_grad();
    let b = Binder::new(&g, store, false);
    let heads = model.forward(&b, &sample.template, &sample.search, SamplingStarts::default())?;
    Ok(total_loss(&heads, &sample.labels, &cfg.loss)?.total.value().item())
}

/// Adam over shuffled frame pairs with step-decayed learning rate. Stops
/// after `train.epochs` epochs or `train.max_steps` steps, whichever comes
/// first; `on_step` sees every step record as it is produced.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    cfg: &RunConfig,
    sequences: &[Sequence],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    let pairs: Vec<(usize, usize)> = sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.len()).map(move |t| (s, t)))
        .collect();
    if pairs.is_empty() {
        return invalid("training needs at least one sequence with two frames");
    }
    let schedule = StepDecay {
        base: cfg.train.lr,
        factor: cfg.train.lr_decay,
        every: cfg.train.decay_every,
    };
    let mut adam = Adam::new(cfg.train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let limit = if cfg.train.max_steps == 0 { usize::MAX } else { cfg.train.max_steps };
    'epochs: for epoch in 0..cfg.train.epochs {
        adam.lr = schedule.lr_at(epoch);
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.train.batch_size) {
            if report.steps.len() >= limit {
                break 'epochs;
            }
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut terms = [0.0; 5];
            let mut used = 0usize;
            for &(s, t) in batch {
                let seq = &sequences[s];
                let sample = match make_training_sample(&seq.frames, &seq.boxes, t, cfg, &model.geometry, &mut rng) {
                    Ok(x) => x,
                    Err(CoreError::LostTarget(_)) => {
                        report.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let starts = SamplingStarts::random(&mut rng, &model.config);
                let sg = sample_gradients(model, store, cfg, &sample, starts)?;
                for (k, v) in sg.grads {
                    match acc.get_mut(&k) {
                        Some(a) => a.data_mut().iter_mut().zip(v.data()).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(k, v);
                        }
                    }
                }
                for (k, v) in sg.buffers {
                    store.set(&k, v)?;
                }
                for (a, b) in terms.iter_mut().zip(sg.terms) {
                    *a += b;
                }
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for (path, p) in store.iter() {
                if p.trainable && !acc.contains_key(path) {
                    acc.insert(path.clone(), Tensor::zeros(p.value.shape()));
                }
            }
            for g in acc.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.step(store, &acc)?;
            let t = terms.map(|v| v * scale);
            let rec = StepRecord {
                step: report.steps.len(),
                epoch,
                lr: adam.lr,
                total: t[0],
                cls_bev: t[1],
                cls_z: t[2],
                reg_bev: t[3],
                reg_z: t[4],
            };
            if !rec.total.is_finite() {
                return Err(CoreError::InvalidInput(format!("non-finite loss at step {}", rec.step)));
            }
            on_step(&rec);
            report.steps.push(rec);
        }
    }
    if cfg.train.recalibrate_norm {
        recalibrate_norm(model, store, cfg, sequences, &pairs, &mut rng)?;
    }
    Ok(report)
}

/// Replaces running normalization statistics by the plain average of the
/// batch statistics over `pairs` under the current weights.
pub fn recalibrate_norm(
    model: &Model,
    store: &mut ParamStore,
    cfg: &RunConfig,
    sequences: &[Sequence],
    pairs: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let mut seen = 0usize;
    for &(s, t) in pairs {
        let seq = &sequences[s];
        let sample = match make_training_sample(&seq.frames, &seq.boxes, t, cfg, &model.geometry, rng) {
            Ok(x) => x,
            Err(CoreError::LostTarget(_)) => continue,
            Err(e) => return Err(e),
        };
        let g = Graph::no_grad();
        let b = Binder::new(&g, store, true).with_momentum(1.0 / (seen + 1) as f64);
        model.forward(&b, &sample.template, &sample.search, SamplingStarts::random(rng, &model.config))?;
        for (k, v) in b.take_buffer_updates() {
            store.set(&k, v)?;
        }
        seen += 1;
    }
    Ok(seen)
}
