//! Causal diffusion models for counterfactual outcome distributions.
//!
//! The crate is organised around the experiment pipeline:
//!
//! - [`sim`]: PK-PD tumor-growth simulator with a confounded treatment policy and
//!   ground-truth one-step-ahead counterfactual samples.
//! - [`diffusion`]: noise schedules, selective masking, forward noising, the
//!   masked training loop and the reverse ancestral sampler.
//! - [`denoiser`]: the relational-self-attention noise predictor with hand-written
//!   reverse-mode gradients and an Adam optimizer.
//! - [`metrics`]: quantile summaries, RMSE at a quantile level and normalised
//!   1-Wasserstein distance.
//! - [`data_io`]: tensor assembly and the on-disk formats.
//! - [`harness`]: experiment orchestration used by the `cdm` binary.

pub mod data_io;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod sim;

pub use error::{CdmError, Result};
