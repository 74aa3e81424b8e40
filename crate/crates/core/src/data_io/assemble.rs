//! Conversion of trajectories into masked model inputs.
//!
//! Channel layout per time row `t`: `[V[t]/V_max, chemo[t], radio[t], (stage−1)/3]`,
//! where the treatments are the ones decided at `t` (they act on `V[t+1]`).

use crate::diffusion::batch::{Example, MaskedBatch, SequenceSet, Tensor3};
use crate::diffusion::mask::get_mask;
use crate::error::{CdmError, Result};
use crate::sim::{Patient, Trajectory, TreatmentChoice};

pub const CHANNELS: [&str; 4] = ["volume", "chemo", "radio", "stage"];
pub const NUM_FEATURES: usize = 4;
pub const VOLUME: usize = 0;
pub const CHEMO: usize = 1;
pub const RADIO: usize = 2;
pub const STAGE: usize = 3;

pub fn normalize_volume(v: f64, v_max: f64) -> f64 {
    v / v_max
}

pub fn denormalize_volume(x: f64, v_max: f64) -> f64 {
    x * v_max
}

fn stage_value(stage: u8) -> f64 {
    (stage as f64 - 1.0) / 3.0
}

/// The first `len` rows of a trajectory, row-major `(len × 4)`.
pub fn trajectory_rows(traj: &Trajectory, stage: u8, v_max: f64, len: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(len * NUM_FEATURES);
    for t in 0..len {
        rows.extend_from_slice(&[
            normalize_volume(traj.volumes[t], v_max),
            traj.chemo_applied[t] as f64,
            traj.radio_applied[t] as f64,
            stage_value(stage),
        ]);
    }
    rows
}

/// One tensor for the whole cohort, padded to the horizon, with the volume
/// of each patient's last active step masked. Patients with fewer than two
/// active steps are skipped; the second value counts them.
pub fn assemble_training_tensor(patients: &[Patient], v_max: f64, horizon: usize) -> Result<(MaskedBatch, usize)> {
    let kept: Vec<&Patient> = patients.iter().filter(|p| p.trajectory.active_len >= 2).collect();
    let skipped = patients.len() - kept.len();
    if kept.is_empty() {
        return Err(CdmError::Config("no trajectory has two or more active steps".into()));
    }
    let b = kept.len();
    let mut data = Tensor3::zeros(b, horizon, NUM_FEATURES);
    let mut seq_len = Vec::with_capacity(b);
    for (i, p) in kept.iter().enumerate() {
        let len = p.trajectory.active_len;
        if len > horizon {
            return Err(CdmError::Shape(format!("trajectory of {len} steps exceeds horizon {horizon}")));
        }
        let rows = trajectory_rows(&p.trajectory, p.params.stage, v_max, len);
        let start = i * horizon * NUM_FEATURES;
        data.data[start..start + rows.len()].copy_from_slice(&rows);
        seq_len.push(len);
    }
    let mask = get_mask((b, horizon, NUM_FEATURES), &seq_len, &[VOLUME], &[1])?;
    Ok((MaskedBatch::new(data, mask, seq_len)?, skipped))
}

/// Every one-step-ahead prediction problem contained in the cohort: for each
/// patient and each `len ∈ 2..=active_len`, the prefix of `len` rows with the
/// final volume masked.
///
/// The final row's treatment channels are cleared: those decisions were taken
/// after observing the volume being predicted.
pub fn one_step_examples(patients: &[Patient], v_max: f64) -> (SequenceSet, usize) {
    let mut items = Vec::new();
    let mut skipped = 0;
    for p in patients {
        let traj = &p.trajectory;
        if traj.active_len < 2 {
            skipped += 1;
            continue;
        }
        let full = trajectory_rows(traj, p.params.stage, v_max, traj.active_len);
        for len in 2..=traj.active_len {
            let mut data = full[..len * NUM_FEATURES].to_vec();
            let last = (len - 1) * NUM_FEATURES;
            data[last + CHEMO] = 0.0;
            data[last + RADIO] = 0.0;
            let mut mask = vec![0u8; len * NUM_FEATURES];
            mask[last + VOLUME] = 1;
            items.push(Example { len, data, mask });
        }
    }
    (SequenceSet { f: NUM_FEATURES, items }, skipped)
}

/// Conditioning input for the counterfactual `V[t+1]` under `choice`: rows
/// `0..=t` observed with the treatment at `t` replaced by `choice`, and row
/// `t+1` carrying only the stage, its volume masked.
pub fn eval_example(traj: &Trajectory, stage: u8, t: usize, choice: TreatmentChoice, v_max: f64) -> Result<Example> {
    if t >= traj.active_len {
        return Err(CdmError::Index(format!("step {t} outside active length {}", traj.active_len)));
    }
    let len = t + 2;
    let mut data = trajectory_rows(traj, stage, v_max, t + 1);
    data[t * NUM_FEATURES + CHEMO] = choice.chemo() as f64;
    data[t * NUM_FEATURES + RADIO] = choice.radio() as f64;
    data.extend_from_slice(&[0.0, 0.0, 0.0, stage_value(stage)]);
    let mut mask = vec![0u8; len * NUM_FEATURES];
    mask[(t + 1) * NUM_FEATURES + VOLUME] = 1;
    Ok(Example { len, data, mask })
}

/// [`eval_example`] as a single-item batch.
pub fn assemble_eval_tensor(
    traj: &Trajectory,
    stage: u8,
    t: usize,
    choice: TreatmentChoice,
    v_max: f64,
) -> Result<MaskedBatch> {
    let ex = eval_example(traj, stage, t, choice, v_max)?;
    Ok(SequenceSet { f: NUM_FEATURES, items: vec![ex] }.collate(&[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Terminal, PatientParams};

    fn toy_patient() -> Patient {
        let trajectory = Trajectory {
            id: 0,
            volumes: vec![10.0, 12.0, 11.0, 9.0],
            chemo_applied: vec![1, 0, 1, 0],
            radio_applied: vec![0, 1, 1, 0],
            chemo_conc: vec![5.0, 2.5, 6.25, 3.125],
            active_len: 4,
            terminal: Terminal::Alive,
        };
        let params = PatientParams { rho: 0.01, alpha: 0.1, beta: 0.01, beta_c: 0.03, stage: 3, v0: 10.0 };
        Patient { params, trajectory }
    }

    #[test]
    fn factual_choice_reproduces_prefix() {
        let p = toy_patient();
        let ex = eval_example(&p.trajectory, 3, 1, TreatmentChoice::Radio, 100.0).unwrap();
        let rows = trajectory_rows(&p.trajectory, 3, 100.0, 2);
        assert_eq!(&ex.data[..8], &rows[..]);
        assert_eq!(ex.mask.iter().map(|m| *m as usize).sum::<usize>(), 1);
        assert_eq!(ex.mask[2 * 4], 1);
    }

    #[test]
    fn choices_differ_only_in_treatment_entries() {
        let p = toy_patient();
        let base = eval_example(&p.trajectory, 3, 2, TreatmentChoice::None, 100.0).unwrap();
        for choice in TreatmentChoice::ALL {
            let ex = eval_example(&p.trajectory, 3, 2, choice, 100.0).unwrap();
            for (i, (a, b)) in ex.data.iter().zip(&base.data).enumerate() {
                if a != b {
                    assert!(i == 2 * 4 + CHEMO || i == 2 * 4 + RADIO);
                }
            }
        }
        assert!(eval_example(&p.trajectory, 3, 4, TreatmentChoice::None, 100.0).is_err());
    }

    #[test]
    fn prefixes_clear_the_target_rows_treatments() {
        let (set, skipped) = one_step_examples(&[toy_patient()], 100.0);
        assert_eq!(skipped, 0);
        assert_eq!(set.len(), 3);
        for ex in &set.items {
            let last = (ex.len - 1) * 4;
            assert_eq!(ex.data[last + CHEMO], 0.0);
            assert_eq!(ex.data[last + RADIO], 0.0);
            assert_eq!(ex.mask[last], 1);
        }
    }
}
