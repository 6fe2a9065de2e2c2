//! Desk-scale supervised training.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod optim;

use std::io::Write;
use std::path::Path;

pub use augment::augment;
pub use checkpoint::{load_backbone, load_checkpoint, load_into, save_checkpoint, AnyTensor};
pub use data::{load_cifar10_bin, load_idx, load_mnist, Dataset, Split};
pub use optim::{adamw_step, cross_entropy_ls, AdamHyper, AdamState, Schedule};

use crate::attention::NormKind;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, Trainable, UfoViT};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Rates are quoted per this many samples and scaled linearly with batch size.
pub const REFERENCE_BATCH: f64 = 512.0;
pub const EVAL_BATCH: usize = 128;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Learning rate at batch size 512.
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub droppath_rate: f64,
    pub seed: u64,
    pub ablation_kind: NormKind,
    /// Update only the classifier head.
    pub freeze_backbone: bool,
    pub min_lr: f64,
    /// Random crop (and flip, when `flip` is set) on training batches.
    pub augment: bool,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            batch_size: 128,
            epochs: 10,
            warmup_epochs: 1.0,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            droppath_rate: 0.05,
            seed: 42,
            ablation_kind: NormKind::XNorm,
            freeze_backbone: false,
            min_lr: 1e-5,
            augment: true,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / REFERENCE_BATCH
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(format!("invalid training config: {m}")));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return bad(format!("warmup_epochs {} must lie in [0, epochs]", self.warmup_epochs));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} must lie in [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return bad(format!("droppath_rate {} must lie in [0, 1)", self.droppath_rate));
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("base_lr must be positive, min_lr and weight_decay non-negative".into());
        }
        Ok(())
    }

    /// Schedule over `total_steps`, with warmup covering the same fraction of
    /// steps as `warmup_epochs` of `epochs`.
    pub fn schedule(&self, total_steps: usize) -> Schedule {
        let warmup = (total_steps as f64 * self.warmup_epochs / self.epochs as f64).round() as usize;
        Schedule { peak_lr: self.effective_lr(), min_lr: self.min_lr, warmup_steps: warmup, total_steps }
    }

    /// Model configuration with the ablation kind and DropPath rate applied.
    pub fn apply_to(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig { norm_kind: self.ablation_kind, droppath_rate: self.droppath_rate, ..model.clone() }
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    config.schedule(total_steps).lr_at(step)
}

/// One history row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Rate of the last step of the epoch.
    pub lr: f64,
    /// Mean loss over the epoch's steps.
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(model: &UfoViT<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_compatible(model: &UfoViT<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let mc = model.config();
    if mc.norm_kind != cfg.ablation_kind {
        return Err(Error::usage(format!(
            "model was built with {} attention, training config asks for {}",
            mc.norm_kind, cfg.ablation_kind
        )));
    }
    if mc.num_classes != data.num_classes {
        return Err(Error::usage(format!(
            "model has {} classes, dataset has {}",
            mc.num_classes, data.num_classes
        )));
    }
    if mc.in_chans != data.channels() {
        return Err(Error::dim(format!("model expects {} channels, dataset has {}", mc.in_chans, data.channels())));
    }
    Ok(())
}

/// Trains `model` in place. `on_epoch` sees every history row as it is
/// produced. Given the same seed, configuration and data, every number is
/// reproduced exactly.
pub fn train(
    model: &mut UfoViT<f32>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, train_set, cfg)?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let schedule = cfg.schedule(total);
    let hyper = AdamHyper { weight_decay: cfg.weight_decay, ..Default::default() };
    let mut state = AdamState::<f32>::new(model.params().iter().map(|p| p.value.shape()));
    let decay: Vec<bool> = model.params().iter().map(|p| p.decay).collect();
    let trainable = if cfg.freeze_backbone { Trainable::HeadOnly } else { Trainable::All };

    let mut root = SplitMix64::new(cfg.seed);
    let mut shuffle_rng = root.split();
    let mut augment_rng = root.split();
    let mut drop_rng = root.split();

    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk);
            let x = if cfg.augment { augment(&x, &mut augment_rng, cfg.flip) } else { x };
            lr = schedule.lr_at(step);
            let diverged = |e: Error, loss: f64| match e {
                Error::Numeric(_) => Error::Divergence { step, loss },
                other => other,
            };
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let opts = ForwardOptions { train: true, trainable, rng: Some(&mut drop_rng), probe: false };
            let out = model.forward_on(&mut tape, xv, opts).map_err(|e| diverged(e, f64::NAN))?;
            let loss = cross_entropy_ls(&mut tape, out.logits, &labels, cfg.label_smoothing)
                .map_err(|e| diverged(e, f64::NAN))?;
            let loss_value = tape.value(loss)[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step, loss: loss_value });
            }
            tape.backward(loss).map_err(|e| diverged(e, loss_value))?;
            let grads: Vec<Option<&Tensor<f32>>> = out.params.iter().map(|&v| tape.grad(v)).collect();
            let mut params: Vec<&mut Tensor<f32>> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adamw_step(&mut params, &grads, &decay, &mut state, lr, &hyper)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { step, loss: loss_value });
            }
            report.step_losses.push(loss_value);
            epoch_loss += loss_value;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: epoch_loss / steps_per_epoch as f64,
            test_acc: evaluate(model, test_set)?,
        };
        on_epoch(&record);
        report.history.push(record);
    }
    Ok(report)
}

/// Writes `epoch,step,lr,train_loss,test_acc` rows.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,step,lr,train_loss,test_acc\n");
    for r in history {
        out.push_str(&format!("{},{},{:e},{:?},{:?}\n", r.epoch, r.step, r.lr, r.train_loss, r.test_acc));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_lr_scales_with_batch() {
        let c = TrainConfig { base_lr: 5e-4, batch_size: 512, ..Default::default() };
        assert_eq!(c.effective_lr(), 5e-4);
        let c = TrainConfig { batch_size: 128, ..c };
        assert_eq!(c.effective_lr(), 1.25e-4);
    }

    #[test]
    fn warmup_longer_than_training_is_rejected() {
        let c = TrainConfig { warmup_epochs: 3.0, epochs: 2, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn lr_hits_peak_at_warmup_end() {
        let c = TrainConfig { epochs: 10, warmup_epochs: 1.0, ..Default::default() };
        assert_eq!(lr_at(100, 1000, &c), c.effective_lr());
        assert!((lr_at(999, 1000, &c) - c.min_lr).abs() < 1e-12);
    }

    #[test]
    fn history_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history_csv(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,step,lr,train_loss,test_acc\n");
    }
}
