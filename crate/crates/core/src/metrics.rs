//! Distributional and point metrics over per-cell sample sets.
//!
//! Every metric is reported as a percentage of `V_max`.

use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};

/// Default number of quantile levels.
pub const DEFAULT_QUANTILES: usize = 100;

/// Value at `level ∈ [0, 1]` of an ascending sample, interpolating linearly
/// between order statistics placed at levels `(i + 0.5)/n`.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = (level * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = h - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

fn sorted_copy(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(CdmError::Domain("quantiles of an empty sample".into()));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(CdmError::Domain("NaN in sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// The `kq` quantiles at levels `(j − 0.5)/kq`, `j = 1..=kq`.
pub fn quantiles(samples: &[f64], kq: usize) -> Result<Vec<f64>> {
    if kq == 0 {
        return Err(CdmError::Config("need at least one quantile level".into()));
    }
    let s = sorted_copy(samples)?;
    Ok((1..=kq).map(|j| quantile_sorted(&s, (j as f64 - 0.5) / kq as f64)).collect())
}

/// How the per-cell quantile gap is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Norm {
    /// Mean absolute quantile difference (divided by the number of levels).
    #[default]
    Mean,
    /// Sum of absolute quantile differences.
    RawL1,
}

fn check_cells(pred: &[Vec<f64>], truth: &[Vec<f64>], mask: &[bool]) -> Result<usize> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(CdmError::Shape(format!(
            "{} predicted cells, {} truth cells, {} mask entries",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(CdmError::Domain("no evaluated cells".into()));
    }
    Ok(n)
}

/// RMSE between the `level`-quantiles of predicted and true samples over
/// the selected cells, as a percentage of `v_max`.
pub fn rmse_from_quantile(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    mask: &[bool],
    level: f64,
    v_max: f64,
) -> Result<f64> {
    let n = check_cells(pred, truth, mask)?;
    let mut sum = 0.0;
    for ((p, t), _) in pred.iter().zip(truth).zip(mask).filter(|(_, m)| **m) {
        let d = quantile_sorted(&sorted_copy(p)?, level) - quantile_sorted(&sorted_copy(t)?, level);
        sum += d * d;
    }
    Ok((sum / n as f64).sqrt() * 100.0 / v_max)
}

/// Quantile-based 1-Wasserstein distance averaged over the selected cells,
/// as a percentage of `v_max`.
pub fn wasserstein1(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    mask: &[bool],
    kq: usize,
    v_max: f64,
    norm: W1Norm,
) -> Result<f64> {
    let n = check_cells(pred, truth, mask)?;
    let mut sum = 0.0;
    for ((p, t), _) in pred.iter().zip(truth).zip(mask).filter(|(_, m)| **m) {
        let qp = quantiles(p, kq)?;
        let qt = quantiles(t, kq)?;
        let l1: f64 = qp.iter().zip(&qt).map(|(a, b)| (a - b).abs()).sum();
        sum += match norm {
            W1Norm::Mean => l1 / kq as f64,
            W1Norm::RawL1 => l1,
        };
    }
    Ok(sum / n as f64 * 100.0 / v_max)
}
