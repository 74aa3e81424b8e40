//! Ancestral reverse sampling of masked coordinates.

use rand::Rng;
use rand_distr::StandardNormal;

use super::batch::{MaskedBatch, Tensor3};
use super::schedule::NoiseSchedule;
use super::EpsModel;
use crate::error::{CdmError, Result};

/// Draws `n_samples` completions of `cond`. Masked coordinates start from
/// `N(0, 1)` and follow
///
/// ```text
/// z_{k-1} = (z_k − β_k/√(1−ᾱ_k)·ε̂) / √(1−β_k) + σ_k·w,   σ_k² = β_k(1−ᾱ_{k-1})/(1−ᾱ_k)
/// ```
///
/// with `w = 0` at `k = 1`; observed coordinates keep their conditioning
/// values throughout. All chains run as one batch; result `s` holds chain `s`.
pub fn sample_reverse<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &MaskedBatch,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Tensor3>> {
    sample_reverse_clipped(model, cond, sched, n_samples, None, rng)
}

/// Like [`sample_reverse`], but when `clip = Some((lo, hi))` each step first
/// forms the implied clean estimate `x̂₀ = (z_k − √(1−ᾱ_k)·ε̂)/√ᾱ_k`, clamps it
/// to `[lo, hi]` and takes the posterior mean
///
/// ```text
/// μ = √ᾱ_{k-1}·β_k/(1−ᾱ_k)·x̂₀ + √(1−β_k)·(1−ᾱ_{k-1})/(1−ᾱ_k)·z_k
/// ```
///
/// which equals the unclipped update whenever `x̂₀` is inside the range.
pub fn sample_reverse_clipped<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &MaskedBatch,
    sched: &NoiseSchedule,
    n_samples: usize,
    clip: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<Vec<Tensor3>> {
    cond.validate()?;
    if let Some((lo, hi)) = clip {
        if !(lo < hi) {
            return Err(CdmError::Config(format!("x0 clip range [{lo}, {hi}] is empty")));
        }
    }
    let (b, t, f) = cond.shape();
    let big = cond.repeat(n_samples);
    let masked: Vec<usize> = big.mask.iter().enumerate().filter(|(_, m)| **m != 0).map(|(i, _)| i).collect();
    let mut z = big.data.clone();
    for &i in &masked {
        z.data[i] = rng.sample(StandardNormal);
    }
    if !masked.is_empty() {
        for k in (1..=sched.steps()).rev() {
            let beta = sched.beta(k);
            let ab = sched.alpha_bar(k);
            let ab_prev = sched.alpha_bar(k - 1);
            let coef = beta / (1.0 - ab).sqrt();
            let scale = 1.0 / (1.0 - beta).sqrt();
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let eps_hat = model.predict_eps(&z, &big, k)?;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ck = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for &i in &masked {
                let mut v = match clip {
                    None => scale * (z.data[i] - coef * eps_hat.data[i]),
                    Some((lo, hi)) => {
                        let x0 = (z.data[i] - (1.0 - ab).sqrt() * eps_hat.data[i]) / ab.sqrt();
                        c0 * x0.clamp(lo, hi) + ck * z.data[i]
                    }
                };
                if k > 1 {
                    v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                z.data[i] = v;
            }
        }
    }
    let per = b * t * f;
    let out = (0..n_samples)
        .map(|s| Tensor3 { b, t, f, data: z.data[s * per..(s + 1) * per].to_vec() })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::rng::stream;

    /// Predicts a fixed fraction of the current state as noise.
    struct Shrink(f64);

    impl EpsModel for Shrink {
        fn predict_eps(&self, z: &Tensor3, _: &MaskedBatch, _: usize) -> Result<Tensor3> {
            Ok(Tensor3 { data: z.data.iter().map(|x| self.0 * x).collect(), ..z.clone() })
        }
    }

    fn cond() -> MaskedBatch {
        let data = Tensor3::from_vec(2, 3, 1, vec![0.2, 0.4, 0.0, 0.1, 0.0, 0.0]).unwrap();
        MaskedBatch::new(data, vec![0, 0, 1, 0, 1, 0], vec![3, 2]).unwrap()
    }

    #[test]
    fn wide_clip_matches_plain_update() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 5).unwrap();
        let plain = sample_reverse(&Shrink(0.3), &cond(), &sched, 4, &mut stream(3, 0)).unwrap();
        let wide = sample_reverse_clipped(&Shrink(0.3), &cond(), &sched, 4, Some((-1e9, 1e9)), &mut stream(3, 0)).unwrap();
        for (a, b) in plain.iter().zip(&wide) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn tight_clip_bounds_output() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 5).unwrap();
        let out = sample_reverse_clipped(&Shrink(-2.0), &cond(), &sched, 50, Some((0.0, 1.0)), &mut stream(4, 0)).unwrap();
        for s in &out {
            // k = 1 has no noise and ᾱ_0 = 1, so the last step returns the clipped x̂₀.
            assert!((0.0..=1.0).contains(&s.get(0, 2, 0)));
            assert!((0.0..=1.0).contains(&s.get(1, 1, 0)));
            assert_eq!(s.get(0, 1, 0), 0.4);
        }
        assert!(sample_reverse_clipped(&Shrink(0.0), &cond(), &sched, 1, Some((1.0, 1.0)), &mut stream(4, 0)).is_err());
    }
}
