//! Masked denoising diffusion: schedules, masking, forward noising, the
//! training loop and the ancestral reverse sampler.

pub mod batch;
pub mod mask;
pub mod noise;
pub mod sample;
pub mod schedule;
pub mod train;

use crate::denoiser::{Denoiser, ParamStore, Span, Tape};
use crate::error::Result;
use crate::rng::CdmRng;

pub use batch::{Example, MaskedBatch, SequenceSet, Tensor3};
pub use mask::get_mask;
pub use noise::{masked_mse, masked_mse_grad, noise_batch, training_loss, LossOutcome};
pub use sample::{sample_reverse, sample_reverse_clipped};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use train::{train, EpochRecord, TrainHyper, TrainState};

/// Anything that predicts the injected noise `ε` from a noised batch.
///
/// Only predictions at masked coordinates are ever consumed.
pub trait EpsModel: Sync {
    fn predict_eps(&self, z: &Tensor3, batch: &MaskedBatch, k: usize) -> Result<Tensor3>;
}

/// An [`EpsModel`] with parameters that can be fitted by [`train`].
pub trait TrainableModel: EpsModel {
    type Tape;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Training-mode forward pass (dropout active).
    fn forward_train(&self, z: &Tensor3, batch: &MaskedBatch, k: usize, rng: &mut CdmRng)
        -> Result<(Tensor3, Self::Tape)>;

    /// Accumulates parameter gradients for `∂loss/∂prediction = d_pred`.
    fn backward(&mut self, tape: Self::Tape, d_pred: &Tensor3);
}

impl EpsModel for Denoiser {
    fn predict_eps(&self, z: &Tensor3, batch: &MaskedBatch, k: usize) -> Result<Tensor3> {
        self.predict(z, batch, k, Span::Masked)
    }
}

impl TrainableModel for Denoiser {
    type Tape = Tape;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward_train(&self, z: &Tensor3, batch: &MaskedBatch, k: usize, rng: &mut CdmRng) -> Result<(Tensor3, Tape)> {
        self.forward(z, batch, k, Span::Masked, Some(rng))
    }

    fn backward(&mut self, tape: Tape, d_pred: &Tensor3) {
        Denoiser::backward(self, tape, d_pred)
    }
}
