//! Adam with cosine-annealed learning rate, global-norm clipping and
//! best-validation checkpointing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledProblem;
use crate::error::{ensure, Error, Result};
use crate::loss::{loss, LossMode};
use crate::microgen::{rng_for, stream_seed};
use crate::operators::{GradOptions, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossMode,
    /// Use only the first `val_limit` validation samples each epoch.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 5e-3,
            min_lr: 1e-6,
            epochs: 20,
            batch_size: 4,
            clip_norm: 1.0,
            seed: 0,
            loss: LossMode::Total,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_lr > 0.0 && self.min_lr > 0.0, InvalidArgument, "learning rates must be positive");
        ensure!(self.min_lr <= self.max_lr, InvalidArgument, "final learning rate exceeds the initial one");
        ensure!(self.epochs >= 1, InvalidArgument, "need at least one epoch");
        ensure!(self.batch_size >= 1, InvalidArgument, "batch size must be at least 1");
        ensure!(self.clip_norm > 0.0, InvalidArgument, "clip norm must be positive");
        Ok(())
    }

    /// Learning rate used throughout `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.max_lr, self.min_lr)
    }
}

/// Cosine annealing with `max` at epoch 0 and `min` at the last epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, max: f64, min: f64) -> f64 {
    if epochs <= 1 {
        return max;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescale `g` in place to norm at most `max_norm`; returns the norm before.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss in the configured mode, as seen by the optimizer.
    pub train_loss: f64,
    /// Mean total loss of evaluation-mode predictions.
    pub val_loss: f64,
    pub mean_grad_norm: f64,
    /// Samples whose adjoint solve stopped before reaching its tolerance.
    pub adjoint_unconverged: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
}

/// Mean total loss of evaluation-mode predictions.
pub fn mean_eval_loss(model: &Model, samples: &[LabeledProblem], mode: LossMode) -> Result<f64> {
    ensure!(!samples.is_empty(), InvalidArgument, "no samples to evaluate");
    let mut acc = 0.0;
    for s in samples {
        let pred = model.predict(&s.problem)?;
        acc += loss(&s.target, &pred, &s.problem.stiffness, mode)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Depth of the training rollout for one sample visit.
fn rollout_depth(model: &Model, seed: u64, epoch: usize, id: u64) -> usize {
    let mut rng = rng_for(stream_seed(seed, epoch as u64), id);
    model.config.deq.sample_train_depth(&mut rng)
}

/// Train in place. On return the model holds the best-validation
/// parameters. A non-finite loss or gradient aborts with the model reset to
/// the best parameters seen so far.
pub fn train(model: &mut Model, train: &[LabeledProblem], val: &[LabeledProblem], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    ensure!(!train.is_empty(), InvalidArgument, "training split is empty");
    ensure!(!val.is_empty(), InvalidArgument, "validation split is empty");
    let val = &val[..cfg.val_limit.unwrap_or(val.len()).clamp(1, val.len())];
    let n = model.params().len();
    let mut adam = Adam::new(n);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::MAX));
    let mut best = model.params().data().to_vec();
    let mut history = TrainHistory {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut grads = vec![0.0; n];
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut norm_sum, mut steps, mut unconverged) = (0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // per-sample gradients may run in parallel; the reduction below
            // always sums them in batch order
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let depth = rollout_depth(model, cfg.seed, epoch, s.id);
                    let opts = GradOptions::training(&model.config.deq, depth);
                    let mut g = vec![0.0; n];
                    model.gradient(&s.problem, &s.target, cfg.loss, &opts, &mut g).map(|r| (s.id, r, g))
                })
                .collect();
            grads.iter_mut().for_each(|g| *g = 0.0);
            for res in results {
                let (id, rep, g) = match res {
                    Ok(x) => x,
                    Err(Error::Numerical(_)) => return Err(abort(model, &best, epoch, None)),
                    Err(e) => return Err(e),
                };
                if !rep.loss.is_finite() || !g.iter().all(|x| x.is_finite()) {
                    return Err(abort(model, &best, epoch, Some(id)));
                }
                loss_sum += rep.loss;
                unconverged += rep.adjoint.is_some_and(|a| !a.converged) as usize;
                grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            norm_sum += clip_global_norm(&mut grads, cfg.clip_norm);
            steps += 1;
            adam.update(model.params_mut().data_mut(), &grads, lr);
        }
        let val_loss = match mean_eval_loss(model, val, LossMode::Total) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Numerical(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = Some(epoch);
            best.copy_from_slice(model.params().data());
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            mean_grad_norm: norm_sum / steps as f64,
            adjoint_unconverged: unconverged,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {:>3} lr {:.2e} train {:.4e} val {:.4e} |g| {:.3e} adjoint-unconverged {} ({:.1}s)",
            model.kind(),
            epoch,
            lr,
            rec.train_loss,
            rec.val_loss,
            rec.mean_grad_norm,
            rec.adjoint_unconverged,
            rec.seconds
        );
        history.epochs.push(rec);
    }
    model.params_mut().data_mut().copy_from_slice(&best);
    Ok(history)
}

fn abort(model: &mut Model, best: &[f64], epoch: usize, id: Option<u64>) -> Error {
    model.params_mut().data_mut().copy_from_slice(best);
    let at = id.map(|i| format!(" at sample {i}")).unwrap_or_default();
    Error::Numerical(format!("training diverged in epoch {epoch}{at}; parameters reset to the last good checkpoint"))
}
