use cdm_core::rng::stream;
use cdm_core::sim::{
    cohort_counterfactuals, counterfactual_samples, diameter_from_volume, generate_cohort, sample_patient,
    treatment_prob, tumor_step, volume_from_diameter, PatientParams, SimConfig, Terminal,
};
use proptest::prelude::*;

fn patient() -> impl Strategy<Value = PatientParams> {
    (0.0..0.1f64, 0.0..0.5f64, 0.0..0.1f64, 1u8..=4, 0.01..1000.0f64).prop_map(|(rho, alpha, beta_c, stage, v0)| {
        PatientParams { rho, alpha, beta: alpha / 10.0, beta_c, stage, v0 }
    })
}

proptest! {
    #[test]
    fn growth_step_stays_in_range(p in patient(), v in 1e-3..2000.0f64, conc in 0.0..10.0f64,
                                  dose in prop::sample::select(vec![0.0, 2.0]), eps in -0.5..0.5f64) {
        let cfg = SimConfig::default();
        let next = tumor_step(v, conc, dose, &p, &cfg, eps).unwrap();
        prop_assert!((0.0..=cfg.v_max).contains(&next));
    }

    #[test]
    fn policy_is_a_monotone_probability(gamma in 0.0..20.0f64, d1 in 0.0..15.0f64, d2 in 0.0..15.0f64) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (p_lo, p_hi) = (treatment_prob(lo, gamma, 6.5), treatment_prob(hi, gamma, 6.5));
        prop_assert!((0.0..=1.0).contains(&p_lo) && (0.0..=1.0).contains(&p_hi));
        prop_assert!(p_lo <= p_hi);
    }

    #[test]
    fn diameter_and_volume_are_inverse(d in 0.01..30.0f64) {
        prop_assert!((diameter_from_volume(volume_from_diameter(d)) - d).abs() < 1e-9 * d.max(1.0));
    }

    #[test]
    fn trajectories_respect_invariants(seed in 0u64..1000, gamma in 0.0..10.0f64, horizon in 2usize..40) {
        let cfg = SimConfig { horizon, ..SimConfig::with_gamma(gamma) };
        for pt in generate_cohort(&cfg, 5, seed, 0).unwrap() {
            let tr = &pt.trajectory;
            prop_assert!(tr.active_len <= horizon && tr.active_len == tr.volumes.len());
            prop_assert!(tr.volumes.iter().all(|v| (0.0..=cfg.v_max).contains(v)));
            prop_assert!(tr.chemo_applied.iter().chain(&tr.radio_applied).all(|x| *x <= 1));
            if tr.active_len < horizon {
                prop_assert!(tr.terminal != Terminal::Alive);
            }
            prop_assert!((1..=4).contains(&pt.params.stage));
            prop_assert!(pt.params.v0 > 0.0 && pt.params.v0 < cfg.v_max);
        }
    }
}

#[test]
fn counterfactual_draws_stay_in_range() {
    let cfg = SimConfig { noise_sd: 0.2, horizon: 12, ..SimConfig::with_gamma(5.0) };
    let cohort = generate_cohort(&cfg, 50, 9, 0).unwrap();
    let cells = cohort_counterfactuals(&cohort, &cfg, 30, 10).unwrap();
    for (pt, per_t) in cohort.iter().zip(&cells) {
        assert_eq!(per_t.len(), pt.trajectory.active_len - 1);
        for set in per_t {
            for c in set {
                assert_eq!(c.samples.len(), 30);
                assert!(c.samples.iter().all(|v| (0.0..=cfg.v_max).contains(v)));
            }
        }
    }
}

#[test]
fn confounding_treats_large_tumours_more_often() {
    let cfg = SimConfig::with_gamma(10.0);
    let cohort = generate_cohort(&cfg, 1500, 21, 0).unwrap();
    let (mut big, mut big_treated, mut small, mut small_treated) = (0usize, 0usize, 0usize, 0usize);
    for pt in &cohort {
        let tr = &pt.trajectory;
        for t in 0..tr.active_len - 1 {
            let d = diameter_from_volume(tr.volumes[t]);
            let treated = tr.chemo_applied[t] as usize;
            if d > 9.0 {
                big += 1;
                big_treated += treated;
            } else if d < 4.0 {
                small += 1;
                small_treated += treated;
            }
        }
    }
    assert!(big > 100 && small > 100, "{big} {small}");
    assert!(big_treated as f64 / big as f64 > 0.8);
    assert!((small_treated as f64 / small as f64) < 0.2);
}

#[test]
fn cohort_generation_does_not_depend_on_batching() {
    let cfg = SimConfig::default();
    let whole = generate_cohort(&cfg, 6, 4, 0).unwrap();
    let tail = generate_cohort(&cfg, 3, 4, 3).unwrap();
    assert_eq!(&whole[3..], &tail[..]);
}

#[test]
fn redraws_keep_response_parameters_positive() {
    let cfg = SimConfig::default();
    let mut rng = stream(2, 0);
    for _ in 0..20_000 {
        let p = sample_patient(&mut rng, &cfg).unwrap();
        assert!(p.rho > 0.0 && p.alpha > 0.0 && p.beta_c > 0.0);
        assert!((p.beta - p.alpha / cfg.params.alpha_beta_ratio).abs() < 1e-15);
    }
}

#[test]
fn factual_choice_matches_noise_free_step() {
    let cfg = SimConfig { noise_sd: 0.0, ..SimConfig::with_gamma(3.0) };
    let pt = &generate_cohort(&cfg, 1, 5, 0).unwrap()[0];
    let tr = &pt.trajectory;
    for t in 0..tr.active_len - 1 {
        let cells = counterfactual_samples(tr, t, &pt.params, &cfg, 3, &mut stream(1, 1)).unwrap();
        let factual = cells.iter().find(|c| c.choice.chemo() == tr.chemo_applied[t] && c.choice.radio() == tr.radio_applied[t]).unwrap();
        assert!(factual.samples.iter().all(|v| *v == tr.volumes[t + 1]), "t={t}");
    }
}
