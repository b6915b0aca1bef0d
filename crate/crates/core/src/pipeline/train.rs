use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate;
use super::model::Model;
use crate::datapack::{batch_order, Batch, FeatureSample};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::numkit::{Adam, ParamStore};

/// Stream of the training RNG (shuffling and dropout); initialization uses stream 0.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Resumable training loop with early stopping on validation accuracy.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    /// Parameter values at the best validation epoch.
    pub best: ParamStore,
    pub history: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.train.seed);
        rng.set_stream(TRAIN_STREAM);
        Trainer {
            adam: Adam::new(model.cfg.train.lr),
            best: model.store.clone(),
            model,
            rng,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
            history: Vec::new(),
        }
    }

    pub fn finished(&self) -> bool {
        let t = &self.model.cfg.train;
        self.epoch >= t.epochs || (self.epoch > 0 && self.since_best >= t.patience)
    }

    /// One optimizer step on `batch`; returns the pre-step loss.
    pub fn step(&mut self, batch: &Batch, batch_idx: usize) -> Result<f64> {
        let diverged = |model: &Model, epoch: usize| Error::Diverged {
            epoch,
            batch: batch_idx,
            report: model.store.norm_report(),
        };
        let model = &self.model;
        let mut s = Session::train(&model.store, &mut self.rng);
        let out = model.forward(&mut s, batch);
        let out = match out {
            Ok(o) => o,
            Err(Error::NonFinite(_)) => return Err(diverged(model, self.epoch)),
            Err(e) => return Err(e),
        };
        let loss = match model.loss(&mut s, &out, batch) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(diverged(model, self.epoch)),
            Err(e) => return Err(e),
        };
        let g = s.g;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(diverged(model, self.epoch));
        }
        let grads = g.backward(loss)?;
        self.model.store.zero_grads();
        g.accumulate_grads(&grads, &mut self.model.store);
        if self.adam.step(&mut self.model.store).is_err() {
            return Err(diverged(&self.model, self.epoch));
        }
        Ok(value)
    }

    pub fn run_epoch(&mut self, train: &[FeatureSample], val: &[FeatureSample]) -> Result<EpochRecord> {
        let cfg = self.model.cfg;
        let order = batch_order(train.len(), cfg.train.batch_size, true, &mut self.rng)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (i, idx) in order.iter().enumerate() {
            let refs: Vec<&FeatureSample> = idx.iter().map(|&j| &train[j]).collect();
            let batch = Batch::stack(&refs, cfg.background_index)?;
            let l = self.step(&batch, i)?;
            total += l * refs.len() as f64;
            count += refs.len();
        }
        let val_acc = match evaluate(&self.model, val, cfg.mode) {
            Ok(r) => r.accuracy,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    batch: order.len().saturating_sub(1),
                    report: self.model.store.norm_report(),
                })
            }
            Err(e) => return Err(e),
        };
        self.epoch += 1;
        if val_acc > self.best_val {
            self.best_val = val_acc;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            self.best = self.model.store.clone();
        } else {
            self.since_best += 1;
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            train_loss: total / count as f64,
            val_acc,
        };
        log::info!("epoch {} loss {:.6} val_acc {:.4}", rec.epoch, rec.train_loss, rec.val_acc);
        self.history.push(rec);
        Ok(rec)
    }

    pub fn run(&mut self, train: &[FeatureSample], val: &[FeatureSample]) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training needs non-empty train and validation splits".into()));
        }
        while !self.finished() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> Result<TrainOutcome> {
        let mut model = self.model;
        model.load_values(&self.best)?;
        Ok(TrainOutcome {
            model,
            history: self.history,
            best_epoch: self.best_epoch,
            best_val: self.best_val,
            epochs_run: self.epoch,
        })
    }
}

pub fn train(model: Model, train: &[FeatureSample], val: &[FeatureSample]) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model);
    t.run(train, val)?;
    t.into_outcome()
}
