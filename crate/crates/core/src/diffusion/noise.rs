//! Forward noising of masked coordinates and the masked noise-prediction loss.

use rand::Rng;
use rand_distr::StandardNormal;

use super::batch::{MaskedBatch, Tensor3};
use super::schedule::NoiseSchedule;
use super::EpsModel;
use crate::error::{CdmError, Result};

/// Noises masked coordinates to step `k`; observed coordinates pass through
/// unchanged. `k = 0` means "no noise". Returns `(z_k, ε)` with `ε` drawn over
/// the full tensor.
pub fn noise_batch<R: Rng + ?Sized>(
    batch: &MaskedBatch,
    k: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor3, Tensor3)> {
    if k > sched.steps() {
        return Err(CdmError::Index(format!("diffusion step {k} outside 0..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(k);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (b, t, f) = batch.shape();
    let eps: Vec<f64> = (0..b * t * f).map(|_| rng.sample(StandardNormal)).collect();
    let mut z = batch.data.clone();
    for (i, (zv, m)) in z.data.iter_mut().zip(&batch.mask).enumerate() {
        if *m != 0 {
            *zv = sa * *zv + sn * eps[i];
        }
    }
    Ok((z, Tensor3 { b, t, f, data: eps }))
}

/// Mean squared error over masked coordinates and the number of such
/// coordinates. An empty mask gives a loss of 0.
pub fn masked_mse(pred: &Tensor3, eps: &Tensor3, mask: &[u8]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for ((p, e), m) in pred.data.iter().zip(&eps.data).zip(mask) {
        if *m != 0 {
            sum += (p - e) * (p - e);
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Gradient of [`masked_mse`] with respect to `pred`.
pub fn masked_mse_grad(pred: &Tensor3, eps: &Tensor3, mask: &[u8]) -> Tensor3 {
    let n = mask.iter().filter(|m| **m != 0).count().max(1) as f64;
    let data = pred
        .data
        .iter()
        .zip(&eps.data)
        .zip(mask)
        .map(|((p, e), m)| if *m != 0 { 2.0 * (p - e) / n } else { 0.0 })
        .collect();
    Tensor3 { b: pred.b, t: pred.t, f: pred.f, data }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutcome {
    pub loss: f64,
    pub masked_count: usize,
    pub k: usize,
}

/// One evaluation of the training objective with a single `k ~ U{1..K}`.
pub fn training_loss<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    batch: &MaskedBatch,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossOutcome> {
    let k = rng.random_range(1..=sched.steps());
    let (z, eps) = noise_batch(batch, k, sched, rng)?;
    if batch.masked_count() == 0 {
        log::warn!("training_loss called on a batch without masked entries");
        return Ok(LossOutcome { loss: 0.0, masked_count: 0, k });
    }
    let pred = model.predict_eps(&z, batch, k)?;
    let (loss, masked_count) = masked_mse(&pred, &eps, &batch.mask);
    Ok(LossOutcome { loss, masked_count, k })
}
