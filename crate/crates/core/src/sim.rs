//! PK-PD tumor-growth simulator.
//!
//! Tumor volume follows a Gompertz-style growth term with chemotherapy and
//! radiotherapy kill terms:
//!
//! ```text
//! V[t+1] = clamp(V[t] · (1 + ρ·ln(K/V[t]) − β_c·C[t] − (α·d[t] + β·d[t]²) + ε[t]), 0, V_max)
//! ```
//!
//! `C[t]` is the chemo concentration (exponential decay plus administered dose),
//! `d[t]` the radiotherapy dose of the current step. Treatment is assigned by a
//! logistic policy on the recent mean tumor diameter whose slope `γ` sets the
//! amount of time-dependent confounding.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CdmError, Result};
use crate::rng;

/// Sphere volume (cm³) for a diameter in cm.
pub fn volume_from_diameter(d: f64) -> f64 {
    std::f64::consts::PI / 6.0 * d * d * d
}

/// Sphere diameter (cm) for a volume in cm³.
pub fn diameter_from_volume(v: f64) -> f64 {
    2.0 * (3.0 * v.max(0.0) / (4.0 * std::f64::consts::PI)).cbrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Growth rate.
    pub rho: f64,
    /// Linear radiotherapy response (1/Gy).
    pub alpha: f64,
    /// Quadratic radiotherapy response (1/Gy²).
    pub beta: f64,
    /// Chemotherapy response per concentration unit.
    pub beta_c: f64,
    /// Cancer stage in 1..=4.
    pub stage: u8,
    /// Initial volume (cm³).
    pub v0: f64,
}

/// Log-normal on volume, parameterised by the mean and sd of `ln V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub mu: f64,
    pub sigma: f64,
}

/// Correlated Gaussian over (ρ, α, β_c), truncated to positive values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDistribution {
    pub rho_mean: f64,
    pub rho_sd: f64,
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    pub beta_c_mean: f64,
    pub beta_c_sd: f64,
    /// Pairwise correlation shared by all three pairs.
    pub correlation: f64,
    /// β = α / alpha_beta_ratio.
    pub alpha_beta_ratio: f64,
}

impl Default for ParamDistribution {
    fn default() -> Self {
        ParamDistribution {
            rho_mean: 7.0e-5,
            rho_sd: 7.23e-3,
            alpha_mean: 0.0398,
            alpha_sd: 0.168,
            beta_c_mean: 0.028,
            beta_c_sd: 0.0007,
            correlation: 0.0,
            alpha_beta_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Carrying capacity (cm³).
    pub k_cc: f64,
    /// Death threshold (cm³).
    pub v_max: f64,
    pub gamma_chemo: f64,
    pub gamma_radio: f64,
    /// Diameter offset of the assignment policy (cm).
    pub intercept: f64,
    /// Trailing window for the recent mean diameter (steps).
    pub window: usize,
    pub noise_sd: f64,
    pub chemo_dose: f64,
    pub radio_dose: f64,
    /// Chemo half-life in steps.
    pub chemo_half_life: f64,
    pub recover_prob: f64,
    /// Horizon T (number of recorded volumes for a surviving patient).
    pub horizon: usize,
    pub stage_weights: Vec<f64>,
    pub stage_v0: Vec<LogNormalSpec>,
    pub v0_lower: f64,
    pub v0_upper: f64,
    pub params: ParamDistribution,
}

impl Default for SimConfig {
    fn default() -> Self {
        let v_max = volume_from_diameter(13.0);
        // ln V = ln(π/6) + 3 ln d maps the per-stage diameter log-normals onto volume.
        let lv = |mu_d: f64, sd_d: f64| LogNormalSpec {
            mu: (std::f64::consts::PI / 6.0).ln() + 3.0 * mu_d,
            sigma: 3.0 * sd_d,
        };
        SimConfig {
            k_cc: volume_from_diameter(30.0),
            v_max,
            gamma_chemo: 0.0,
            gamma_radio: 0.0,
            intercept: 13.0 / 2.0,
            window: 15,
            noise_sd: 0.01,
            chemo_dose: 5.0,
            radio_dose: 2.0,
            chemo_half_life: 1.0,
            recover_prob: 0.0,
            horizon: 30,
            stage_weights: vec![1432.0, 128.0, 8554.0, 12840.0],
            stage_v0: vec![lv(1.72, 4.70), lv(1.96, 1.63), lv(2.76, 6.87), lv(3.86, 8.82)],
            v0_lower: 0.1,
            v0_upper: 0.95 * v_max,
            params: ParamDistribution::default(),
        }
    }
}

impl SimConfig {
    /// Default configuration with the same slope for both therapies.
    pub fn with_gamma(gamma: f64) -> Self {
        SimConfig { gamma_chemo: gamma, gamma_radio: gamma, ..Default::default() }
    }

    /// Per-step multiplicative decay of the chemo concentration.
    pub fn chemo_decay(&self) -> f64 {
        0.5f64.powf(1.0 / self.chemo_half_life)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CdmError::Config(m.to_string()));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.k_cc) || !pos(self.v_max) {
            return bad("k_cc and v_max must be positive");
        }
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.recover_prob) {
            return bad("recover_prob must lie in [0, 1]");
        }
        if self.horizon < 2 {
            return bad("horizon must be >= 2");
        }
        if !pos(self.chemo_half_life) {
            return bad("chemo_half_life must be positive");
        }
        if ![self.gamma_chemo, self.gamma_radio, self.intercept, self.chemo_dose, self.radio_dose]
            .iter()
            .all(|x| x.is_finite())
        {
            return bad("policy and dose parameters must be finite");
        }
        if self.stage_weights.len() != 4 || self.stage_v0.len() != 4 {
            return bad("stage_weights and stage_v0 need one entry per stage (4)");
        }
        if self.stage_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.stage_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("stage_weights must be nonnegative with a positive sum");
        }
        if !(self.v0_lower > 0.0 && self.v0_lower < self.v0_upper && self.v0_upper < self.v_max) {
            return bad("v0 truncation must satisfy 0 < lower < upper < v_max");
        }
        for s in &self.stage_v0 {
            if !s.mu.is_finite() || !(s.sigma >= 0.0 && s.sigma.is_finite()) {
                return bad("stage log-normal needs finite mu and sigma >= 0");
            }
            if s.sigma == 0.0 {
                let v = s.mu.exp();
                if v < self.v0_lower || v > self.v0_upper {
                    return bad("point-mass v0 lies outside the truncation bounds");
                }
            }
        }
        let p = &self.params;
        for (m, sd) in [(p.rho_mean, p.rho_sd), (p.alpha_mean, p.alpha_sd), (p.beta_c_mean, p.beta_c_sd)] {
            if !m.is_finite() || !(sd >= 0.0 && sd.is_finite()) {
                return bad("parameter means must be finite and sds >= 0");
            }
            if sd == 0.0 && m <= 0.0 {
                return bad("a zero-variance parameter needs a positive mean");
            }
        }
        if !(p.correlation > -0.5 && p.correlation < 1.0) {
            return bad("correlation must lie in (-0.5, 1) for a valid 3x3 covariance");
        }
        if !pos(p.alpha_beta_ratio) {
            return bad("alpha_beta_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    Alive,
    Died,
    Recovered,
}

impl Terminal {
    pub fn code(self) -> u8 {
        match self {
            Terminal::Alive => 0,
            Terminal::Died => 1,
            Terminal::Recovered => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Terminal::Alive),
            1 => Some(Terminal::Died),
            2 => Some(Terminal::Recovered),
            _ => None,
        }
    }
}

/// One patient's factual sequence.
///
/// Row `t` holds the volume `V[t]`, the treatment decided at `t` and the chemo
/// concentration after that decision; `V[t+1]` is produced by row `t`. The
/// final row carries no decision (zero treatments, decayed concentration).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub volumes: Vec<f64>,
    pub chemo_applied: Vec<u8>,
    pub radio_applied: Vec<u8>,
    pub chemo_conc: Vec<f64>,
    pub active_len: usize,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TreatmentChoice {
    None,
    Chemo,
    Radio,
    Both,
}

impl TreatmentChoice {
    pub const ALL: [TreatmentChoice; 4] =
        [TreatmentChoice::None, TreatmentChoice::Chemo, TreatmentChoice::Radio, TreatmentChoice::Both];

    pub fn chemo(self) -> u8 {
        matches!(self, TreatmentChoice::Chemo | TreatmentChoice::Both) as u8
    }

    pub fn radio(self) -> u8 {
        matches!(self, TreatmentChoice::Radio | TreatmentChoice::Both) as u8
    }

    pub fn from_flags(chemo: u8, radio: u8) -> Self {
        match (chemo != 0, radio != 0) {
            (false, false) => TreatmentChoice::None,
            (true, false) => TreatmentChoice::Chemo,
            (false, true) => TreatmentChoice::Radio,
            (true, true) => TreatmentChoice::Both,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TreatmentChoice::None => "none",
            TreatmentChoice::Chemo => "chemo",
            TreatmentChoice::Radio => "radio",
            TreatmentChoice::Both => "both",
        }
    }
}

/// Ground-truth draws of `V[t+1]` under one treatment choice at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualCell {
    pub patient: usize,
    pub t: usize,
    pub choice: TreatmentChoice,
    pub samples: Vec<f64>,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if sigma == 0.0 {
        return mu;
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let (mut a, mut b) = ((lo - mu) / sigma, (hi - mu) / sigma);
    // Sample in the lower tail for accuracy of the inverse cdf.
    let flip = a > 0.0;
    if flip {
        (a, b) = (-b, -a);
    }
    let (ca, cb) = (std.cdf(a), std.cdf(b));
    let u: f64 = rng.random();
    let z = std.inverse_cdf(ca + u * (cb - ca)).clamp(a, b);
    let z = if flip { -z } else { z };
    (mu + sigma * z).clamp(lo, hi)
}

const MAX_REDRAWS: usize = 100_000;

/// Draws one patient: stage, stage-specific truncated log-normal `v0` and the
/// positive-truncated correlated response parameters with `β = α / ratio`.
pub fn sample_patient<R: Rng + ?Sized>(rng: &mut R, config: &SimConfig) -> Result<PatientParams> {
    config.validate()?;
    let total: f64 = config.stage_weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut stage = 4u8;
    for (i, w) in config.stage_weights.iter().enumerate() {
        if u < *w {
            stage = i as u8 + 1;
            break;
        }
        u -= *w;
    }
    let spec = config.stage_v0[stage as usize - 1];
    let v0 = truncated_normal(rng, spec.mu, spec.sigma, config.v0_lower.ln(), config.v0_upper.ln())
        .exp()
        .clamp(config.v0_lower, config.v0_upper);

    let p = &config.params;
    let means = [p.rho_mean, p.alpha_mean, p.beta_c_mean];
    let sds = [p.rho_sd, p.alpha_sd, p.beta_c_sd];
    let l = equicorrelated_cholesky(p.correlation);
    for _ in 0..MAX_REDRAWS {
        let z: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let mut x = [0.0; 3];
        for i in 0..3 {
            let corr: f64 = (0..=i).map(|j| l[i][j] * z[j]).sum();
            x[i] = means[i] + sds[i] * corr;
        }
        if x.iter().all(|v| *v > 0.0) {
            return Ok(PatientParams {
                rho: x[0],
                alpha: x[1],
                beta: x[1] / p.alpha_beta_ratio,
                beta_c: x[2],
                stage,
                v0,
            });
        }
    }
    Err(CdmError::Config(format!(
        "no positive response parameters after {MAX_REDRAWS} draws"
    )))
}

/// Lower Cholesky factor of the 3x3 correlation matrix with all off-diagonals `c`.
fn equicorrelated_cholesky(c: f64) -> [[f64; 3]; 3] {
    let l00 = 1.0;
    let l10 = c;
    let l11 = (1.0 - c * c).sqrt();
    let l20 = c;
    let l21 = (c - l20 * l10) / l11;
    let l22 = (1.0 - l20 * l20 - l21 * l21).sqrt();
    [[l00, 0.0, 0.0], [l10, l11, 0.0], [l20, l21, l22]]
}

/// One growth step, clamped to `[0, V_max]`.
pub fn tumor_step(
    v: f64,
    chemo_conc: f64,
    radio: f64,
    p: &PatientParams,
    config: &SimConfig,
    eps: f64,
) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(CdmError::Domain(format!("tumor_step needs a positive volume, got {v}")));
    }
    let factor = 1.0 + p.rho * (config.k_cc / v).ln()
        - p.beta_c * chemo_conc
        - (p.alpha * radio + p.beta * radio * radio)
        + eps;
    Ok((v * factor).clamp(0.0, config.v_max))
}

/// Logistic assignment probability `σ(γ·(d − θ))`.
pub fn treatment_prob(recent_diam: f64, gamma: f64, intercept: f64) -> f64 {
    let x = gamma * (recent_diam - intercept);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean diameter of the trailing `window` volumes ending at index `t`.
pub fn recent_diameter(volumes: &[f64], t: usize, window: usize) -> f64 {
    let start = (t + 1).saturating_sub(window);
    let slice = &volumes[start..=t];
    slice.iter().map(|v| diameter_from_volume(*v)).sum::<f64>() / slice.len() as f64
}

/// Simulates one factual trajectory under the confounded policy.
pub fn simulate_factual<R: Rng + ?Sized>(
    id: usize,
    p: &PatientParams,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let decay = config.chemo_decay();
    let horizon = config.horizon;
    let mut volumes = Vec::with_capacity(horizon);
    let mut chemo_applied = Vec::with_capacity(horizon);
    let mut radio_applied = Vec::with_capacity(horizon);
    let mut chemo_conc = Vec::with_capacity(horizon);
    volumes.push(p.v0);
    let mut conc = 0.0;
    let mut terminal = Terminal::Alive;

    for t in 0..horizon - 1 {
        let d = recent_diameter(&volumes, t, config.window);
        let chemo = (rng.random::<f64>() < treatment_prob(d, config.gamma_chemo, config.intercept)) as u8;
        let radio = (rng.random::<f64>() < treatment_prob(d, config.gamma_radio, config.intercept)) as u8;
        conc = conc * decay + config.chemo_dose * chemo as f64;
        let dose = config.radio_dose * radio as f64;
        let eps = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
        let mut next = tumor_step(volumes[t], conc, dose, p, config, eps)?;
        chemo_applied.push(chemo);
        radio_applied.push(radio);
        chemo_conc.push(conc);

        if next >= config.v_max {
            terminal = Terminal::Died;
        } else if next <= 0.0 {
            terminal = Terminal::Recovered;
        } else if config.recover_prob > 0.0 && rng.random::<f64>() < config.recover_prob {
            next = 0.0;
            terminal = Terminal::Recovered;
        }
        volumes.push(next);
        if terminal != Terminal::Alive {
            break;
        }
    }
    chemo_applied.push(0);
    radio_applied.push(0);
    chemo_conc.push(conc * decay);

    let active_len = volumes.len();
    Ok(Trajectory { id, volumes, chemo_applied, radio_applied, chemo_conc, active_len, terminal })
}

/// `n` ground-truth draws of `V[t+1]` for each of the four treatment choices at
/// decision step `t`, holding the history through `t` fixed.
///
/// Valid for `t + 1 < active_len`, giving `active_len − 1` decision steps.
pub fn counterfactual_samples<R: Rng + ?Sized>(
    traj: &Trajectory,
    t: usize,
    p: &PatientParams,
    config: &SimConfig,
    n: usize,
    rng: &mut R,
) -> Result<[CounterfactualCell; 4]> {
    if t + 1 >= traj.active_len {
        return Err(CdmError::Index(format!(
            "decision step {t} has no next volume (active_len {})",
            traj.active_len
        )));
    }
    if n == 0 {
        return Err(CdmError::Config("counterfactual sample count must be >= 1".into()));
    }
    let carried = if t == 0 { 0.0 } else { traj.chemo_conc[t - 1] };
    let v = traj.volumes[t];
    let decay = config.chemo_decay();
    let cells = TreatmentChoice::ALL.map(|choice| {
        let conc = carried * decay + config.chemo_dose * choice.chemo() as f64;
        let dose = config.radio_dose * choice.radio() as f64;
        let samples = (0..n)
            .map(|_| {
                let eps = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
                tumor_step(v, conc, dose, p, config, eps)
            })
            .collect::<Result<Vec<_>>>();
        samples.map(|samples| CounterfactualCell { patient: traj.id, t, choice, samples })
    });
    let [a, b, c, d] = cells;
    Ok([a?, b?, c?, d?])
}

/// A patient with its factual trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub params: PatientParams,
    pub trajectory: Trajectory,
}

/// Simulates `n` patients; patient `i` draws from its own stream `(seed, first_id + i)`.
pub fn generate_cohort(config: &SimConfig, n: usize, seed: u64, first_id: usize) -> Result<Vec<Patient>> {
    config.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            let mut r = rng::stream(seed, id as u64);
            let params = sample_patient(&mut r, config)?;
            let trajectory = simulate_factual(id, &params, config, &mut r)?;
            Ok(Patient { params, trajectory })
        })
        .collect()
}

/// All counterfactual cells of a cohort: `(active_len − 1) × 4` per patient.
pub fn cohort_counterfactuals(
    patients: &[Patient],
    config: &SimConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<[CounterfactualCell; 4]>>> {
    patients
        .par_iter()
        .map(|pt| {
            let mut r = rng::stream(seed, pt.trajectory.id as u64);
            (0..pt.trajectory.active_len.saturating_sub(1))
                .map(|t| counterfactual_samples(&pt.trajectory, t, &pt.params, config, n, &mut r))
                .collect()
        })
        .collect()
}
