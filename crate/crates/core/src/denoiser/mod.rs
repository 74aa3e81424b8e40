//! Noise-prediction network over the `(time × feature)` grid.
//!
//! Every scalar entry is lifted to `embed_dim` channels, passed through
//! residual blocks of encoder cells built on relational self-attention, and
//! projected back to one value per position.

pub mod grid;
pub mod layers;
pub mod model;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};

pub use model::{Denoiser, Tape};
pub use params::{AdamConfig, ParamStore};

/// Token-mixing layer inside each encoder cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Relational self-attention over a local window.
    Rsa,
    /// Per-position two-layer feed-forward; no mixing across positions.
    FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub embed_dim: usize,
    pub residual_layers: usize,
    pub num_heads: usize,
    /// Window extents `(time, feature)`, both odd.
    pub kernel_size: [usize; 2],
    pub ff_dim: usize,
    pub encoder_cells: usize,
    pub dropout: f64,
    pub backbone: Backbone,
    pub num_features: usize,
    /// Size of the time-index embedding table.
    pub max_time: usize,
    /// Number of diffusion steps `K`; the step table has `K + 1` rows.
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            embed_dim: 32,
            residual_layers: 2,
            num_heads: 8,
            kernel_size: [3, 7],
            ff_dim: 64,
            encoder_cells: 2,
            dropout: 0.1,
            backbone: Backbone::Rsa,
            num_features: 4,
            max_time: 64,
            diffusion_steps: 5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CdmError::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.kernel_size.iter().any(|k| k % 2 == 0) {
            return err(format!("kernel extents {:?} must be odd", self.kernel_size));
        }
        if self.residual_layers == 0 || self.encoder_cells == 0 || self.ff_dim == 0 {
            return err("residual_layers, encoder_cells and ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_features == 0 || self.max_time == 0 || self.diffusion_steps == 0 {
            return err("num_features, max_time and diffusion_steps must be positive".into());
        }
        Ok(())
    }

    /// Total number of token-mixing layers.
    pub fn attention_layers(&self) -> usize {
        self.residual_layers * self.encoder_cells
    }

    /// How many time rows one mixing layer reaches backwards.
    pub fn receptive_radius(&self) -> usize {
        match self.backbone {
            Backbone::Rsa => 2 * (self.kernel_size[0] / 2),
            Backbone::FeedForward => 0,
        }
    }
}

/// Which outputs a forward pass must produce exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    /// Every active position.
    Full,
    /// Only rows from each item's first masked row onwards; other outputs are zero.
    Masked,
}
