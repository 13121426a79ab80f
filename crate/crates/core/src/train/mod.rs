//! Optimization: per-group Adam, global-norm clipping, early stopping and
//! batch-size-invariant evaluation.

mod data;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{embed_texts, prepare_samples, Batch, EpochSource, PerturbedSource, Sample};

use crate::autodiff::{Group, Mode, ParamStore, Tape, Tensor};
use crate::corpus::denormalize;
use crate::error::{Error, Result};
use crate::model::{ParNet, Variant};
use crate::rng::{self, derive_key, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_model: f64,
    pub lr_per_sup: f64,
    pub lr_cross_attn: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Visit training samples in a seeded random order each epoch instead
    /// of chronologically.
    pub shuffle: bool,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_model: 1e-3,
            lr_per_sup: 1e-2,
            lr_cross_attn: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            max_epochs: 50,
            patience: 20,
            batch_size: 32,
            shuffle: false,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Model => self.lr_model,
            Group::PerSup => self.lr_per_sup,
            Group::CrossAttn => self.lr_cross_attn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_model", self.lr_model),
            ("lr_per_sup", self.lr_per_sup),
            ("lr_cross_attn", self.lr_cross_attn),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("eps and clip_norm must be positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs, patience and batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Adam with one learning rate per parameter group. Parameters whose group
/// rate is zero are never written.
#[derive(Debug, Clone)]
pub struct Adam {
    lrs: [f64; 3],
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

fn group_slot(g: Group) -> usize {
    match g {
        Group::Model => 0,
        Group::PerSup => 1,
        Group::CrossAttn => 2,
    }
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam {
            lrs: Group::ALL.map(|g| cfg.lr(g)),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = self.lrs[group_slot(p.group)];
            if lr == 0.0 {
                continue;
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// of the validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
            seen: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        let epoch = self.seen;
        self.seen += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean pre-clip gradient norm over the epoch's batches.
    pub grad_norm: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Drives epochs until `max_epochs` or early stopping. `run_epoch(e)`
/// returns `(train_loss, val_loss, grad_norm)`; `on_best` fires whenever the
/// validation loss improves.
pub fn run_epochs<E, B>(cfg: &TrainConfig, mut run_epoch: E, mut on_best: B) -> Result<TrainReport>
where
    E: FnMut(usize) -> Result<(f64, f64, f64)>,
    B: FnMut(usize),
{
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let (train_loss, val_loss, grad_norm) = run_epoch(epoch)?;
        let decision = stopper.update(val_loss);
        if decision == StopDecision::Improved {
            on_best(epoch);
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} |g| {grad_norm:.3}");
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            grad_norm,
            improved: decision == StopDecision::Improved,
        });
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainReport {
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best(),
        epochs,
        stopped_early,
    })
}

fn nan_guard<T>(r: Result<T>, epoch: usize, batch: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(_) => Error::NanLoss { epoch, batch },
        other => other,
    })
}

/// Trains `model` in place and leaves it at the best validation epoch.
pub fn fit(model: &mut ParNet, train: &dyn EpochSource, val: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::EmptySplit {
            split: "val",
            len: 0,
            needed: 1,
        });
    }
    let mut adam = Adam::new(&model.store, cfg);
    let mut best = model.store.snapshot();
    let report = {
        let model = &mut *model;
        let best = &mut best;
        let cell = std::cell::RefCell::new(model);
        run_epochs(
            cfg,
            |epoch| {
                let mut model = cell.borrow_mut();
                let samples = train.samples(epoch)?;
                if samples.is_empty() {
                    return Err(Error::EmptySplit {
                        split: "train",
                        len: 0,
                        needed: 1,
                    });
                }
                let mut order: Vec<usize> = (0..samples.len()).collect();
                if cfg.shuffle {
                    order.shuffle(&mut rng::keyed(cfg.seed, Stream::BatchShuffle, &[epoch as u64]));
                }
                let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
                for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                    let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                    let batch = Batch::of(&refs)?;
                    let seed = derive_key(cfg.seed, Stream::Dropout, &[epoch as u64, b as u64]);
                    let loss = nan_guard(train_step(&mut model, &batch, cfg.variant, seed), epoch, b)?;
                    let norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
                    if !norm.is_finite() {
                        return Err(Error::NanLoss { epoch, batch: b });
                    }
                    adam.step(&mut model.store);
                    loss_sum += loss;
                    norm_sum += norm;
                    batches += 1;
                }
                let val_loss = nan_guard(normalized_loss(&model, val, cfg.variant, cfg.batch_size), epoch, batches)?;
                Ok((loss_sum / batches as f64, val_loss, norm_sum / batches as f64))
            },
            |_| *best = cell.borrow().store.snapshot(),
        )?
    };
    model.store.restore(&best);
    Ok(report)
}

/// Forward + backward on one batch; gradients are left in the store.
fn train_step(model: &mut ParNet, batch: &Batch, variant: Variant, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.x.clone())?;
    let e = tape.leaf(batch.e.clone())?;
    let out = model.forward_on(&mut tape, x, e, variant, Mode::Train, seed)?;
    let loss = tape.mse_loss(out, &batch.y)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    Ok(value)
}

/// Eval-mode predictions `(T, C)` on the normalized scale, one per sample.
pub fn predict(model: &ParNet, samples: &[Sample], variant: Variant, batch_size: usize) -> Result<Vec<Tensor>> {
    let c = &model.config;
    let per = c.horizon * c.channels;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::of(&refs)?;
        let y = model.forward_variant(&batch.x, &batch.e, variant, Mode::Eval, 0)?;
        for row in y.data().chunks(per) {
            out.push(Tensor::new([c.horizon, c.channels], row.to_vec())?);
        }
    }
    Ok(out)
}

/// Mean squared error on the normalized scale.
pub fn normalized_loss(model: &ParNet, samples: &[Sample], variant: Variant, batch_size: usize) -> Result<f64> {
    let preds = predict(model, samples, variant, batch_size)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        sum += p.data().iter().zip(s.y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += p.numel();
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Number of scalar predictions averaged over.
    pub count: usize,
}

/// MSE and MAE on the original data scale, averaged over all samples,
/// horizon steps and channels. Independent of `batch_size`.
pub fn evaluate(model: &ParNet, samples: &[Sample], variant: Variant, batch_size: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit {
            split: "test",
            len: 0,
            needed: 1,
        });
    }
    let preds = predict(model, samples, variant, batch_size)?;
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        let p = denormalize(p, &s.stats);
        let y = denormalize(&s.y, &s.stats);
        for (a, b) in p.data().iter().zip(y.data()) {
            se += (a - b).powi(2);
            ae += (a - b).abs();
        }
        n += p.numel();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        count: n,
    })
}

/// Writes the per-epoch log as CSV.
pub fn write_epoch_log(path: impl AsRef<Path>, epochs: &[EpochStats]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "epoch,train_loss,val_loss,grad_norm,improved").map_err(io)?;
    for s in epochs {
        writeln!(
            f,
            "{},{},{},{},{}",
            s.epoch, s.train_loss, s.val_loss, s.grad_norm, s.improved
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests;
