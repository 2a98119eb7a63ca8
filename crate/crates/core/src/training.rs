//! SGD with momentum, cosine learning-rate schedule, early stopping and
//! top-k metrics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, MotionClass, Split, VideoClip};
use crate::error::{MooseError, Result};
use crate::model::{Moose, PreparedClip};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_top1,val_top1,val_top5,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Epoch budget; also the schedule's period.
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without improvement tolerated before stopping. An epoch
    /// improves when validation top-1 rises, or holds with a lower loss.
    pub patience: usize,
    /// Replace each training clip by its left-right mirror (label
    /// remapped) with probability ½.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.005,
            lr_min: 0.0,
            epochs: 30,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            patience: 10,
            flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min >= 0.0) {
            return Err(MooseError::invalid(format!(
                "need lr_max > lr_min >= 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MooseError::invalid("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(MooseError::invalid(
                "need momentum in [0, 1) and weight_decay >= 0",
            ));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t / epochs))` for `t` in
/// `[0, epochs]`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.epochs || cfg.epochs == 0 {
        return Err(MooseError::invalid(format!(
            "epoch {t} outside [0, {}]",
            cfg.epochs
        )));
    }
    let phase = t as f64 / cfg.epochs as f64 * PI;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Sgd {
            velocity: store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.tensor.numel()])
                .collect(),
        }
    }

    /// `m ← μ·m + (g + wd·w)`, `w ← w − lr·m`. Parameters excluded from
    /// decay use `wd = 0`; a missing gradient counts as zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(MooseError::invalid(
                "gradient list does not match the registry",
            ));
        }
        for (entry, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(MooseError::NonFiniteGradient(entry.name.clone()));
                }
            }
        }
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let wd = if store.entry(id).decay {
                weight_decay
            } else {
                0.0
            };
            let m = &mut self.velocity[i];
            let w = store.tensor_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = momentum * m[j] + (g + wd * w[j]);
                w[j] -= lr * m[j];
            }
        }
        Ok(())
    }
}

/// Gradients left on `ctx` after backward, indexed like the registry.
pub fn collect_gradients(ctx: &Ctx<'_>) -> Vec<Option<Vec<f64>>> {
    let mut out = vec![None; ctx.store().len()];
    for (id, var) in ctx.bound() {
        out[id.0] = ctx.tape.grad(var).map(<[f64]>::to_vec);
    }
    out
}

/// Whether `label` is among the `k` highest logits, ties going to the lower
/// class index.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let z = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count();
    ahead < k
}

/// Fraction of rows of `logits` `[B × K]` whose label is in the top `k`.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (b, classes) = logits.dims2()?;
    if b == 0 || labels.is_empty() {
        return Err(MooseError::invalid("top-k of an empty batch"));
    }
    if labels.len() != b {
        return Err(MooseError::shape(
            "topk labels",
            logits.shape(),
            &[labels.len()],
        ));
    }
    if k == 0 || k > classes {
        return Err(MooseError::invalid(format!(
            "k = {k} outside [1, {classes}]"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MooseError::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| in_top_k(logits.row(i), l, k))
        .count();
    Ok(hits as f64 / b as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub lr: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_top1, self.val_top1, self.val_top5, self.lr
        )
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

pub fn prepare_all(model: &Moose, clips: &[VideoClip]) -> Result<Vec<PreparedClip>> {
    clips.iter().map(|c| model.prepare(c)).collect()
}

/// Mean loss and top-1 / top-`min(5, K)` accuracy.
pub fn evaluate(model: &Moose, clips: &[PreparedClip], batch_size: usize) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(MooseError::Dataset("cannot evaluate an empty split".into()));
    }
    let k = model.config.num_classes;
    let mut rows = Vec::with_capacity(clips.len() * k);
    let mut loss = 0.0;
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedClip> = chunk.iter().collect();
        let mut ctx = Ctx::new(&model.store);
        let (l, logits) = model.loss(&mut ctx, &refs)?;
        loss += ctx.tape.value(l).data()[0] * chunk.len() as f64;
        rows.extend_from_slice(ctx.tape.value(logits).data());
    }
    let logits = Tensor::new(&[clips.len(), k], rows)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    Ok(Evaluation {
        loss: loss / clips.len() as f64,
        top1: topk_accuracy(&logits, &labels, 1)?,
        top5: topk_accuracy(&logits, &labels, 5.min(k))?,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub stopped_early: bool,
}

/// Trains on the dataset's train split, selecting on val. On return the
/// model holds the parameters of the best validation epoch.
pub fn train(
    model: &mut Moose,
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&MetricRecord),
) -> Result<TrainReport> {
    let train_set = prepare_all(model, dataset.split(Split::Train))?;
    let mirrored = if cfg.flip {
        prepare_mirrored(model, dataset.split(Split::Train), &dataset.classes)?
    } else {
        Vec::new()
    };
    let val_set = prepare_all(model, dataset.split(Split::Val))?;
    train_prepared(model, &train_set, &mirrored, &val_set, cfg, on_epoch)
}

/// Mirrored counterparts of `clips`, `None` where the mirrored class is
/// outside `classes`.
pub fn prepare_mirrored(
    model: &Moose,
    clips: &[VideoClip],
    classes: &[MotionClass],
) -> Result<Vec<Option<PreparedClip>>> {
    clips
        .iter()
        .map(|c| c.mirrored(classes).map(|m| model.prepare(&m)).transpose())
        .collect()
}

/// `mirrored` is either empty or parallel to `train_set`; a non-empty one
/// enables flip augmentation when `cfg.flip` is set.
pub fn train_prepared(
    model: &mut Moose,
    train_set: &[PreparedClip],
    mirrored: &[Option<PreparedClip>],
    val_set: &[PreparedClip],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MooseError::Dataset(
            "training needs non-empty train and val splits".into(),
        ));
    }
    if !mirrored.is_empty() && mirrored.len() != train_set.len() {
        return Err(MooseError::invalid("mirrored set must match the train set"));
    }
    let flip = cfg.flip && !mirrored.is_empty();
    let k = model.config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, f64, ParamStore)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let clips: Vec<&PreparedClip> = batch
                .iter()
                .map(|&i| match &mirrored.get(i) {
                    Some(Some(m)) if flip && rng.random_bool(0.5) => m,
                    _ => &train_set[i],
                })
                .collect();
            let grads = {
                let mut ctx = Ctx::new(&model.store);
                let (loss, logits) = model.loss(&mut ctx, &clips)?;
                loss_sum += ctx.tape.value(loss).data()[0] * clips.len() as f64;
                let z = ctx.tape.value(logits);
                correct += clips
                    .iter()
                    .enumerate()
                    .filter(|&(i, c)| in_top_k(&z.data()[i * k..(i + 1) * k], c.label, 1))
                    .count();
                ctx.tape.backward(loss)?;
                collect_gradients(&ctx)
            };
            sgd.step(&mut model.store, &grads, lr, cfg.momentum, cfg.weight_decay)?;
        }
        let val = evaluate(model, val_set, cfg.batch_size)?;
        let record = MetricRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_top1: correct as f64 / train_set.len() as f64,
            val_top1: val.top1,
            val_top5: val.top5,
            lr,
        };
        on_epoch(&record);
        records.push(record);

        if best
            .as_ref()
            .is_none_or(|b| val.top1 > b.1 || (val.top1 == b.1 && val.loss < b.2))
        {
            best = Some((epoch, val.top1, val.loss, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let (best_epoch, best_val_top1, _, store) = best.expect("at least one epoch ran");
    model.store.copy_values_from(&store)?;
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_top1,
        stopped_early,
    })
}
