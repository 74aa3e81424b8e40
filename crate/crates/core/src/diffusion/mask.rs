//! Selective masking: mark the trailing time steps of chosen features.

use crate::error::{CdmError, Result};

/// Mask of shape `(b, t, f)`, row-major. For item `i` and each listed feature,
/// time indices `[max(seq_len_i − last_n, 0), seq_len_i)` are set to 1.
pub fn get_mask(
    shape: (usize, usize, usize),
    seq_len: &[usize],
    features: &[usize],
    last_n_time: &[usize],
) -> Result<Vec<u8>> {
    let (b, t, f) = shape;
    if features.len() != last_n_time.len() {
        return Err(CdmError::Config(format!(
            "{} features to impute but {} time counts",
            features.len(),
            last_n_time.len()
        )));
    }
    if seq_len.len() != b {
        return Err(CdmError::Shape(format!("{} sequence lengths for batch of {b}", seq_len.len())));
    }
    if let Some(bad) = features.iter().find(|&&x| x >= f) {
        return Err(CdmError::Config(format!("feature index {bad} out of range for {f} features")));
    }
    if let Some(bad) = seq_len.iter().find(|&&l| l > t) {
        return Err(CdmError::Shape(format!("sequence length {bad} exceeds {t} time steps")));
    }
    let mut mask = vec![0u8; b * t * f];
    for (i, &len) in seq_len.iter().enumerate() {
        for (&feat, &n) in features.iter().zip(last_n_time) {
            for ti in len.saturating_sub(n)..len {
                mask[(i * t + ti) * f + feat] = 1;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_last_step() {
        let m = get_mask((1, 4, 1), &[3], &[0], &[1]).unwrap();
        assert_eq!(m, vec![0, 0, 1, 0]);
    }

    #[test]
    fn long_window_covers_whole_sequence() {
        let m = get_mask((1, 4, 2), &[3], &[1], &[10]).unwrap();
        assert_eq!(m, vec![0, 1, 0, 1, 0, 1, 0, 0]);
    }

    #[test]
    fn nothing_to_impute() {
        assert!(get_mask((2, 3, 2), &[3, 2], &[], &[]).unwrap().iter().all(|v| *v == 0));
    }

    #[test]
    fn mismatched_lists_rejected() {
        assert!(matches!(get_mask((1, 3, 2), &[3], &[0, 1], &[1]), Err(CdmError::Config(_))));
    }
}
