use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

use super::metrics::{classifier_metrics, Metrics};
use super::net::{cst, BnMode, Cache, Mode, Model, Real};
use super::{Example, Head, NetworkSpec};
use crate::simulator::SUCCESS_THRESHOLD_CM3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// epochs; 0 keeps it constant.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub oversample_positives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            lr: 0.1,
            lr_decay_every: 10,
            lr_decay_factor: 0.1,
            oversample_positives: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 || !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config(
                "train config needs batch_size >= 2, epochs >= 1 and positive rates".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate of a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr
            * self
                .lr_decay_factor
                .powi(((epoch.max(1) - 1) / self.lr_decay_every) as i32)
    }
}

pub struct LossGrad<T: Real> {
    /// Mean loss over the batch.
    pub loss: f64,
    pub grad: Vec<T>,
    pub(crate) cache: Cache<T>,
}

/// Per-sample loss and its derivative with respect to the logit.
fn sample_loss(head: Head, logit: f64, ex: &Example, volume_scale: f64) -> (f64, f64) {
    match head {
        Head::Classifier => {
            let y = if ex.label { 1.0 } else { 0.0 };
            let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
            (loss, 1.0 / (1.0 + (-logit).exp()) - y)
        }
        Head::Regressor => {
            let r = logit - ex.volume / volume_scale;
            if r.abs() < 1.0 {
                (0.5 * r * r, r)
            } else {
                (r.abs() - 0.5, r.signum())
            }
        }
    }
}

/// Mean cross-entropy (classifier) or smooth-L1 on volume / volume_scale
/// (regressor), with gradients for every trainable tensor. Uses batch
/// statistics, so the model must be in train mode.
pub fn loss_and_grad<T: Real>(model: &Model<T>, batch: &[&Example]) -> Result<LossGrad<T>> {
    if model.mode() != Mode::Train {
        return Err(Error::Mode("eval"));
    }
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let inputs: Vec<_> = batch.iter().map(|e| &e.input).collect();
    let cache = model.forward(&inputs, BnMode::Batch);
    let spec = model.spec();
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut dlogits = Vec::with_capacity(batch.len());
    for (i, (z, ex)) in cache.logits.iter().zip(batch).enumerate() {
        let (l, d) = sample_loss(spec.head, z.to_f64().unwrap(), ex, spec.volume_scale);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        total += l;
        dlogits.push(cst::<T>(d / n));
    }
    let mut grad = vec![T::zero(); model.param_count()];
    model.backward(&inputs, &cache, &dlogits, &mut grad);
    Ok(LossGrad {
        loss: total / n,
        grad,
        cache,
    })
}

/// Mean loss of a forward pass, without gradients.
pub(crate) fn batch_loss<T: Real>(model: &Model<T>, batch: &[&Example], cache: &Cache<T>) -> f64 {
    let spec = model.spec();
    let total: f64 = cache
        .logits
        .iter()
        .zip(batch)
        .map(|(z, ex)| sample_loss(spec.head, z.to_f64().unwrap(), ex, spec.volume_scale).0)
        .sum();
    total / batch.len() as f64
}

/// Which side of each smooth-L1 transition the batch residuals are on.
pub(crate) fn loss_regime<T: Real>(model: &Model<T>, batch: &[&Example], cache: &Cache<T>) -> Vec<bool> {
    match model.spec().head {
        Head::Classifier => Vec::new(),
        Head::Regressor => cache
            .logits
            .iter()
            .zip(batch)
            .map(|(z, e)| (z.to_f64().unwrap() - e.volume / model.spec().volume_scale).abs() < 1.0)
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let (b1, b2) = (cst::<T>(self.beta1), cst::<T>(self.beta2));
        let (one_b1, one_b2) = (cst::<T>(1.0 - self.beta1), cst::<T>(1.0 - self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = cst::<T>(lr * c2.sqrt() / c1);
        let eps = cst::<T>(self.eps * c2.sqrt());
        for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + one_b1 * *g;
            *v = b2 * *v + one_b2 * *g * *g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Sample order of one epoch: every negative once plus as many positives
/// drawn with replacement, shuffled. Without oversampling (or with a
/// missing class) every example appears once.
pub fn epoch_order(labels: &[bool], oversample: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(seed, Purpose::Train, epoch as u64);
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut order = if oversample && !pos.is_empty() && !neg.is_empty() {
        let mut o = neg.clone();
        o.extend((0..neg.len()).map(|_| pos[rng.random_range(0..pos.len())]));
        o
    } else {
        (0..labels.len()).collect()
    };
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Share of positives among the samples consumed this epoch.
    pub positive_fraction: f64,
    pub val: Option<Metrics>,
}

pub struct TrainOutcome {
    /// Eval mode.
    pub model: Model<f32>,
    pub curve: Vec<EpochRecord>,
}

/// Trains a fresh model seeded from `cfg.seed`. `on_epoch` sees each
/// record as soon as the epoch finishes.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.check()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let labels: Vec<bool> = train_set.iter().map(|e| e.label).collect();
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if spec.head == Head::Classifier && (positives == 0 || negatives == 0) {
        return Err(Error::ClassImbalance { positives, negatives });
    }

    let mut model = Model::<f32>::init(spec, cfg.seed)?;
    let mut adam = Adam::new(model.param_count());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(&labels, cfg.oversample_positives, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut seen_pos = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // batch norm needs at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lg = loss_and_grad(&model, &batch).map_err(|e| match e {
                Error::NonFiniteLoss { index } => Error::NonFiniteLoss { index: chunk[index] },
                e => e,
            })?;
            model.update_running_stats(&lg.cache);
            adam.step(model.params_mut(), &lg.grad, lr);
            loss_sum += lg.loss * chunk.len() as f64;
            seen += chunk.len();
            seen_pos += batch.iter().filter(|e| e.label).count();
        }
        let val = if val_set.is_empty() {
            None
        } else {
            model.set_mode(Mode::Eval);
            let m = validation_metrics(&model, val_set)?;
            model.set_mode(Mode::Train);
            Some(m)
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            positive_fraction: seen_pos as f64 / seen.max(1) as f64,
            val,
        };
        on_epoch(&record);
        curve.push(record);
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome { model, curve })
}

/// Classification metrics on the validation split; the regressor is scored
/// by applying the success threshold to its predicted volume.
fn validation_metrics(model: &Model<f32>, val: &[Example]) -> Result<Metrics> {
    let inputs: Vec<_> = val.iter().map(|e| e.input.clone()).collect();
    let preds = model.predict(&inputs)?;
    let labels: Vec<bool> = val.iter().map(|e| e.label).collect();
    Ok(match model.spec().head {
        Head::Classifier => classifier_metrics(&preds, &labels, 0.5),
        Head::Regressor => classifier_metrics(&preds, &labels, SUCCESS_THRESHOLD_CM3),
    })
}

pub fn write_curve_csv(w: impl Write, curve: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss", "val_accuracy", "val_precision", "val_recall", "val_f1"])?;
    for r in curve {
        let v = |f: fn(&Metrics) -> f64| r.val.as_ref().map(|m| f(m).to_string()).unwrap_or_default();
        out.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            v(|m| m.accuracy),
            v(|m| m.precision),
            v(|m| m.recall),
            v(|m| m.f1),
        ])?;
    }
    out.flush().map_err(|e| Error::io("training curve", e))?;
    Ok(())
}
