//! Bag-level training with cross entropy and validation-loss early stopping,
//! and evaluation into a [`MetricsReport`].

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bagdata::Dataset;
use crate::metrics::{self, MetricsReport};
use crate::milnet::MilModel;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Nesterov momentum for SGD (ignored by Adam).
    #[serde(default = "defaults::nesterov_momentum")]
    pub nesterov_momentum: f64,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience_epochs")]
    pub patience_epochs: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    /// Bags whose gradients are averaged into one update.
    #[serde(default = "defaults::accumulation_bags")]
    pub accumulation_bags: usize,
}

mod defaults {
    use crate::optim::OptimizerKind;
    pub fn learning_rate() -> f64 {
        5e-4
    }
    pub fn nesterov_momentum() -> f64 {
        0.9
    }
    pub fn max_epochs() -> usize {
        100
    }
    pub fn patience_epochs() -> usize {
        5
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Sgd
    }
    pub fn accumulation_bags() -> usize {
        1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: defaults::learning_rate(),
            nesterov_momentum: defaults::nesterov_momentum(),
            max_epochs: defaults::max_epochs(),
            patience_epochs: defaults::patience_epochs(),
            rng_seed: 0,
            optimizer: defaults::optimizer(),
            accumulation_bags: defaults::accumulation_bags(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if !(0.0..1.0).contains(&self.nesterov_momentum) {
            return Err(Error::config("nesterov_momentum", "must lie in [0, 1)"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience_epochs == 0 {
            return Err(Error::config("patience_epochs", "must be at least 1"));
        }
        if self.accumulation_bags == 0 {
            return Err(Error::config("accumulation_bags", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Stops once the monitored loss has not improved for `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Mean cross entropy over a dataset.
pub fn mean_loss(model: &MilModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot compute a loss on an empty dataset".into()));
    }
    let mut total = 0.0;
    for bag in &data.bags {
        total += model.loss(bag)?;
    }
    Ok(total / data.len() as f64)
}

pub fn train(model: MilModel, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(MilModel, TrainingLog)> {
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    if val_set.num_classes != train_set.num_classes || train_set.num_classes != model.num_classes() {
        return Err(Error::Data("model, train and validation class counts disagree".into()));
    }
    train_with(model, train_set, cfg, |m, _| mean_loss(m, val_set), |_| {})
}

/// Training loop with a pluggable validation-loss source and an epoch hook.
///
/// Bags are visited one at a time in a seeded per-epoch order; gradients of
/// `accumulation_bags` consecutive bags are averaged into one update. After
/// every epoch `val_loss(model, epoch)` is consulted and the weights with the
/// lowest value seen are kept; training stops after `patience_epochs` epochs
/// without improvement.
pub fn train_with(
    mut model: MilModel,
    train_set: &Dataset,
    cfg: &TrainConfig,
    mut val_loss: impl FnMut(&MilModel, usize) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MilModel, TrainingLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.nesterov_momentum, model.params());
    let mut grads = model.params().zeros_like();
    let mut stopper = EarlyStopping::new(cfg.patience_epochs);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_for(cfg.rng_seed, &[0x7a1, epoch as u64]));

        let mut total = 0.0;
        for chunk in order.chunks(cfg.accumulation_bags) {
            grads.clear();
            for &i in chunk {
                total += model.loss_and_grad(&train_set.bags[i], &mut grads)?;
            }
            grads.scale(1.0 / chunk.len() as f64);
            optimizer.step(model.params_mut(), &grads);
        }
        let train_loss = total / train_set.len() as f64;
        let val = val_loss(&model, epoch)?;
        if !train_loss.is_finite() || !val.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let record = EpochRecord { epoch, train_loss, val_loss: val };
        on_epoch(&record);
        epochs.push(record);

        match stopper.observe(epoch, val) {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    let log = TrainingLog { epochs, best_epoch: stopper.best_epoch(), best_val_loss: stopper.best_loss(), stopped_early };
    Ok((best, log))
}

/// Predicted class probabilities for every bag, in dataset order.
pub fn predict(model: &MilModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.bags.iter().map(|b| model.forward(b).map(|o| o.probs)).collect()
}

pub fn evaluate(model: &MilModel, test_set: &Dataset) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let probs = predict(model, test_set)?;
    let labels: Vec<usize> = test_set.bags.iter().map(|b| b.label).collect();
    Ok(metrics::report(&labels, &probs, test_set.num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_on_increasing_schedule() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..=50 {
            if s.observe(epoch, epoch as f64) == Verdict::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn early_stopping_resets_on_improvement() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(1, 3.0), Verdict::Improved);
        assert_eq!(s.observe(2, 3.0), Verdict::Continue);
        assert_eq!(s.observe(3, 2.0), Verdict::Improved);
        assert_eq!(s.observe(4, 2.5), Verdict::Continue);
        assert_eq!(s.observe(5, 2.5), Verdict::Stop);
        assert_eq!(s.best_epoch(), 3);
    }

    #[test]
    fn single_epoch_budget() {
        use crate::bagdata::{generate_synthetic, stratified_split, SynthConfig};
        use crate::milnet::tests::tiny_config;
        let data = generate_synthetic(&SynthConfig { num_bags: 9, bag_size: 3, image_size: 8, ..SynthConfig::default() }).unwrap();
        let (tr, va, _) = stratified_split(&data, [0.6, 0.4, 0.0], 3).unwrap();
        let model = MilModel::new(tiny_config(), 2).unwrap();
        let cfg = TrainConfig { max_epochs: 1, ..TrainConfig::default() };
        let (_, log) = train(model, &tr, &va, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(log.best_epoch, 1);
        assert!(!log.stopped_early);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { max_epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience_epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { nesterov_momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
