//! Label-smoothed cross-entropy, SGD with momentum, per-step cosine decay,
//! and the epoch loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{Augment, Dataset};
use crate::error::{NiffError, Result};
use crate::model::{Model, ModelSpec};
use crate::param::Parameterized;
use crate::scalar::Scalar;

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Augment = 1,
    Shuffle = 2,
}

/// Generator for `purpose` in `epoch`; the same triple always yields the same
/// sequence, so a resumed run draws what the uninterrupted run would have.
pub fn stream(seed: u64, purpose: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | epoch as u64);
    rng
}

/// Mean smoothed cross-entropy over the batch and its gradient with respect
/// to the logits. Also returns the number of correct argmax predictions.
pub fn cross_entropy<T: Scalar>(logits: &[T], labels: &[u8], classes: usize, smoothing: f64) -> (f64, Vec<T>, usize) {
    let b = labels.len();
    debug_assert_eq!(logits.len(), b * classes);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0f64;
    let mut correct = 0;
    let off = smoothing / classes as f64;
    let on = 1.0 - smoothing + off;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits[i * classes..(i + 1) * classes]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > row[best] { k } else { best });
        if argmax == y as usize {
            correct += 1;
        }
        for (k, v) in row.iter().enumerate() {
            let q = if k == y as usize { on } else { off };
            let logp = v - lse;
            loss -= q * logp;
            grad[i * classes + k] = T::of((logp.exp() - q) / b as f64);
        }
    }
    (loss / b as f64, grad, correct)
}

/// Learning rate at global step `t` of `total`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, lr: f64) {
        let (lr, mu, wd) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay));
        let vel = &mut self.velocity;
        model.visit_params("", &mut |name, p| {
            let v = vel.entry(name).or_insert_with(|| vec![T::zero(); p.len()]);
            for ((w, g), m) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let d = *g + wd * *w;
                *m = mu * *m + d;
                *w -= lr * *m;
            }
        });
        model.invalidate();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr,epoch_seconds";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr, self.seconds
        )
    }
}

/// Model, optimizer and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: Sgd<T>,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Init, 0);
        Ok(Trainer {
            model: Model::build(spec, &mut rng)?,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// One pass over `train` in a seed- and epoch-determined order.
    /// Returns `(mean loss, accuracy, first lr)`.
    pub fn train_epoch(&mut self, train: &Dataset<T>, aug: &Augment) -> Result<(f64, f64, f64)> {
        if train.is_empty() {
            return Err(NiffError::invalid("empty training set"));
        }
        let e = self.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, Stream::Shuffle, e));
        let mut aug_rng = stream(self.cfg.seed, Stream::Augment, e);
        let steps = self.steps_per_epoch(train.len());
        let total = steps * self.cfg.epochs;
        let classes = self.model.classes();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        let first_lr = cosine_lr(self.cfg.lr, e * steps, total);
        for (s, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let (x, y) = train.augmented_batch(idx, aug, &mut aug_rng);
            let logits = self.model.forward(&x, true)?;
            let (loss, glogits, c) = cross_entropy(&logits, &y, classes, self.cfg.label_smoothing);
            if !loss.is_finite() {
                return Err(NiffError::Divergence {
                    epoch: e + 1,
                    step: s,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            correct += c;
            self.model.zero_grad();
            self.model.backward(&glogits)?;
            self.opt.step(&mut self.model, cosine_lr(self.cfg.lr, e * steps + s, total));
        }
        self.epoch += 1;
        let n = train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n, first_lr))
    }
}

/// Top-1 accuracy in evaluation mode.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset<T>, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(NiffError::invalid("empty evaluation set"));
    }
    let classes = model.classes();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = model.forward(&x, false)?;
        for (row, &label) in logits.chunks(classes).zip(&y) {
            let best = (0..classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            if best == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_loss_matches_direct_formula() {
        let logits = [1.0f64, -0.5, 2.0, 0.0, 0.3, 0.3];
        let labels = [2u8, 0];
        let (loss, grad, correct) = cross_entropy(&logits, &labels, 3, 0.1);
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for k in 0..3 {
                let q = if k == y as usize { 0.9 + 0.1 / 3.0 } else { 0.1 / 3.0 };
                want -= q * (row[k].exp() / z).ln();
            }
        }
        assert!((loss - want / 2.0).abs() < 1e-14);
        assert_eq!(correct, 1);
        // gradient rows sum to zero
        for r in grad.chunks(3) {
            assert!(r.iter().sum::<f64>().abs() < 1e-15);
        }
        let eps = 1e-6;
        for j in 0..6 {
            let mut p = logits;
            p[j] += eps;
            let mut m = logits;
            m[j] -= eps;
            let fd = (cross_entropy(&p, &labels, 3, 0.1).0 - cross_entropy(&m, &labels, 3, 0.1).0) / (2.0 * eps);
            assert!((fd - grad[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.02, 0, 100), 0.02);
        assert!((cosine_lr(0.02, 50, 100) - 0.01).abs() < 1e-15);
        assert!(cosine_lr(0.02, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn streams_are_independent_and_repeatable() {
        use rand::RngCore;
        let a = stream(7, Stream::Augment, 3).next_u64();
        assert_eq!(a, stream(7, Stream::Augment, 3).next_u64());
        assert_ne!(a, stream(7, Stream::Shuffle, 3).next_u64());
        assert_ne!(a, stream(7, Stream::Augment, 4).next_u64());
        assert_ne!(a, stream(8, Stream::Augment, 3).next_u64());
    }
}
