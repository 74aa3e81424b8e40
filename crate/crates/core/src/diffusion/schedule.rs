//! Forward-process noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};

const COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-5;
const BETA_MAX: f64 = 0.999;
const LINEAR_START: f64 = 1e-4;
const LINEAR_END: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { kind: ScheduleKind::Cosine, steps: 5 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps)
    }
}

/// `betas[k-1] = β_k` for `k = 1..=K`; `alpha_bars[k] = ᾱ_k` with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(CdmError::Config("a noise schedule needs at least one step".into()));
        }
        let betas = match kind {
            ScheduleKind::Cosine => {
                let f = |k: usize| {
                    let x = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0);
                (1..=steps)
                    .map(|k| (1.0 - (f(k) / f0) / (f(k - 1) / f0)).clamp(BETA_MIN, BETA_MAX))
                    .collect()
            }
            ScheduleKind::Linear if steps == 1 => vec![LINEAR_START],
            ScheduleKind::Linear => (0..steps)
                .map(|i| LINEAR_START + (LINEAR_END - LINEAR_START) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Ok(Self::from_betas(kind, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        NoiseSchedule { kind, betas, alpha_bars }
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_k`, `1 ≤ k ≤ K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_k5_matches_high_precision_reference() {
        // 50-digit evaluation of the clipped cosine recursion.
        let reference = [
            0.101_294_079_400_491_110_96,
            0.279_543_845_984_029_966_29,
            0.473_635_353_449_431_266_95,
            0.724_052_369_108_257_047_54,
            0.999,
        ];
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 5).unwrap();
        for (b, r) in s.betas.iter().zip(reference) {
            assert!((b - r).abs() < 1e-12, "{b} vs {r}");
        }
    }

    #[test]
    fn linear_two_steps_hits_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 2).unwrap();
        assert_eq!(s.betas, vec![1e-4, 0.5]);
    }

    #[test]
    fn monotone_for_all_sizes() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for k in [1, 2, 5, 20, 1000] {
                let s = NoiseSchedule::new(kind, k).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
                assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(NoiseSchedule::new(ScheduleKind::Cosine, 0), Err(CdmError::Config(_))));
    }
}
