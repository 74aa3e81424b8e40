//! Mini-batch training with Adam, global-norm clipping and plateau decay.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::SequenceSet;
use super::noise::{masked_mse, masked_mse_grad, noise_batch};
use super::schedule::NoiseSchedule;
use super::{EpsModel, TrainableModel};
use crate::denoiser::AdamConfig;
use crate::error::{CdmError, Result};
use crate::rng::{stream, sub_seed, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_min: f64,
    pub grad_clip: f64,
    /// Epochs without sufficient validation improvement before decaying.
    pub patience: usize,
    /// Smallest validation decrease that counts as an improvement.
    pub min_improvement: f64,
    /// Cap on optimizer steps per epoch (a random subset of batches is used).
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on validation batches per epoch (always the same batches).
    pub max_val_batches: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 25,
            batch_size: 200,
            lr0: 1e-3,
            lr_decay_factor: 0.9,
            lr_min: 1e-6,
            grad_clip: 4.0,
            patience: 1,
            min_improvement: 1e-5,
            max_batches_per_epoch: None,
            max_val_batches: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(CdmError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return err("epochs, batch_size and patience must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || !(self.lr_min >= 0.0) {
            return err("learning rates must be finite and nonnegative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return err("lr_decay_factor must lie in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return err("grad_clip must be positive");
        }
        if self.max_batches_per_epoch == Some(0) || self.max_val_batches == Some(0) {
            return err("batch caps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub next_epoch: usize,
    pub lr: f64,
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
    pub val_seed: u64,
    pub history: Vec<EpochRecord>,
    pub rng: RngState,
}

impl TrainState {
    pub fn new(hyper: &TrainHyper, seed: u64) -> Self {
        TrainState {
            next_epoch: 0,
            lr: hyper.lr0,
            best_val: None,
            bad_epochs: 0,
            val_seed: sub_seed(seed, "validation"),
            history: Vec::new(),
            rng: RngState::capture(&stream(sub_seed(seed, "training"), 0)),
        }
    }

    pub fn finished(&self, hyper: &TrainHyper) -> bool {
        self.next_epoch >= hyper.epochs
    }
}

/// Trains until `hyper.epochs` epochs are recorded in `state`, calling
/// `on_epoch` after every epoch (e.g. to checkpoint).
pub fn train<M, F>(
    model: &mut M,
    train_set: &SequenceSet,
    val_set: &SequenceSet,
    sched: &NoiseSchedule,
    hyper: &TrainHyper,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<()>
where
    M: TrainableModel,
    F: FnMut(&M, &TrainState) -> Result<()>,
{
    hyper.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CdmError::Config("training and validation sets must be nonempty".into()));
    }
    let mut rng = state
        .rng
        .restore()
        .ok_or_else(|| CdmError::Format("unreadable training rng state".into()))?;

    while state.next_epoch < hyper.epochs {
        let epoch = state.next_epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(hyper.batch_size).collect();
        if let Some(cap) = hyper.max_batches_per_epoch {
            batches.truncate(cap);
        }

        let mut total = 0.0;
        for idx in &batches {
            let batch = train_set.collate(idx);
            let k = rng.random_range(1..=sched.steps());
            let (z, eps) = noise_batch(&batch, k, sched, &mut rng)?;
            let (pred, tape) = model.forward_train(&z, &batch, k, &mut rng).map_err(|e| diverged(epoch, e))?;
            let (loss, count) = masked_mse(&pred, &eps, &batch.mask);
            if !loss.is_finite() {
                return Err(CdmError::Training { epoch, detail: format!("training loss {loss}") });
            }
            total += loss;
            if count == 0 {
                continue;
            }
            let grad = masked_mse_grad(&pred, &eps, &batch.mask);
            let params = model.params_mut();
            params.zero_grads();
            model.backward(tape, &grad);
            let params = model.params_mut();
            params.clip_grad_norm(hyper.grad_clip);
            params.adam_step(state.lr, &hyper.adam).map_err(|e| diverged(epoch, e))?;
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = validation_loss(&*model, val_set, sched, hyper, state.val_seed).map_err(|e| diverged(epoch, e))?;
        if !val_loss.is_finite() {
            return Err(CdmError::Training { epoch, detail: format!("validation loss {val_loss}") });
        }

        match state.best_val {
            Some(best) if val_loss > best - hyper.min_improvement => state.bad_epochs += 1,
            _ => {
                state.best_val = Some(val_loss);
                state.bad_epochs = 0;
            }
        }
        let lr_used = state.lr;
        if state.bad_epochs >= hyper.patience {
            state.lr = (state.lr * hyper.lr_decay_factor).max(hyper.lr_min);
            state.bad_epochs = 0;
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr_used:.2e}");
        state.history.push(EpochRecord { epoch, train_loss, val_loss, lr: lr_used });
        state.next_epoch += 1;
        state.rng = RngState::capture(&rng);
        on_epoch(model, state)?;
    }
    Ok(())
}

/// Mean masked loss over (a fixed prefix of) the validation batches, with a
/// noise stream that is identical every epoch.
pub fn validation_loss<M: EpsModel + ?Sized>(
    model: &M,
    val_set: &SequenceSet,
    sched: &NoiseSchedule,
    hyper: &TrainHyper,
    val_seed: u64,
) -> Result<f64> {
    let mut rng = stream(val_seed, 0);
    let mut order: Vec<usize> = (0..val_set.len()).collect();
    order.shuffle(&mut stream(val_seed, 1));
    let mut batches: Vec<&[usize]> = order.chunks(hyper.batch_size).collect();
    if let Some(cap) = hyper.max_val_batches {
        batches.truncate(cap);
    }
    let mut total = 0.0;
    for idx in &batches {
        let batch = val_set.collate(idx);
        let k = rng.random_range(1..=sched.steps());
        let (z, eps) = noise_batch(&batch, k, sched, &mut rng)?;
        let pred = model.predict_eps(&z, &batch, k)?;
        total += masked_mse(&pred, &eps, &batch.mask).0;
    }
    Ok(total / batches.len() as f64)
}

fn diverged(epoch: usize, e: CdmError) -> CdmError {
    match e {
        CdmError::Numeric { layer, detail } => CdmError::Training { epoch, detail: format!("{layer}: {detail}") },
        other => other,
    }
}
