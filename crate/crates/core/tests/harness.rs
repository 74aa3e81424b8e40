use std::path::Path;

use cdm_core::data_io::store::{checkpoint_from_bytes, encode_checkpoint};
use cdm_core::data_io::Dataset;
use cdm_core::denoiser::{Denoiser, DenoiserConfig};
use cdm_core::diffusion::{train, ScheduleSpec, TrainHyper, TrainState};
use cdm_core::harness::pipeline::{cell_keys, evaluate_with, simulate, training_examples};
use cdm_core::harness::results::read_results;
use cdm_core::harness::{
    cmd_ablate, cmd_report, cmd_seedvar, cmd_sweep, run_point, CellKey, CellSampler, CohortSizes, ExperimentConfig,
    Variant,
};
use cdm_core::rng::CdmRng;
use cdm_core::sim::counterfactual_samples;
use cdm_core::{CdmError, Result};

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.sim.horizon = 6;
    cfg.sizes = CohortSizes { train: 16, val: 4, test: 4 };
    cfg.gammas = vec![0.0, 5.0, 10.0];
    cfg.model = DenoiserConfig {
        embed_dim: 8,
        num_heads: 2,
        residual_layers: 1,
        encoder_cells: 1,
        ff_dim: 16,
        kernel_size: [3, 3],
        ..DenoiserConfig::default()
    };
    cfg.train = TrainHyper { epochs: 2, batch_size: 32, max_batches_per_epoch: None, ..TrainHyper::default() };
    cfg.eval.model_samples = 5;
    cfg.eval.truth_samples = 12;
    cfg.eval.cells_per_batch = 16;
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Fresh simulator draws, optionally shifted, standing in for a model.
struct Oracle {
    shift: f64,
}

impl CellSampler for Oracle {
    fn sample_cells(&self, ds: &Dataset, cells: &[CellKey], n: usize, rng: &mut CdmRng) -> Result<Vec<Vec<f64>>> {
        cells
            .iter()
            .map(|c| {
                let p = &ds.test[c.patient];
                let four = counterfactual_samples(&p.trajectory, c.t, &p.params, &ds.sim, n, rng)?;
                Ok(four[c.choice.index()].samples.iter().map(|v| v + self.shift).collect())
            })
            .collect()
    }
}

#[test]
fn oracle_sampler_sits_at_the_noise_floor() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.sim.noise_sd = 0.05;
    cfg.sizes.test = 30;
    cfg.eval.model_samples = 20;
    cfg.eval.truth_samples = 100;
    let ds = simulate(&cfg, 0.0, 2).unwrap();
    let w1 = |shift: f64| {
        let rows = evaluate_with(&ds, &Oracle { shift }, &cfg.eval, "oracle", 0, "h").unwrap();
        assert!(rows.iter().all(|r| r.value >= 0.0));
        rows.iter().find(|r| r.metric == "w1").unwrap().value
    };
    // Mean within-cell sd of the truth, in % of V_max.
    let keys = cell_keys(&ds);
    let sd = keys
        .iter()
        .map(|c| {
            let s = ds.counterfactuals.cell(c.patient, c.t, c.choice).unwrap();
            let m = s.iter().sum::<f64>() / s.len() as f64;
            (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt()
        })
        .sum::<f64>()
        / keys.len() as f64
        * 100.0
        / ds.manifest.v_max;
    let floor = w1(0.0);
    assert!(floor < 0.5 * sd, "oracle W1 {floor} vs truth sd {sd}");
    assert!(w1(0.01 * ds.manifest.v_max) > floor + 0.5);
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = simulate(&cfg, 5.0, 4).unwrap();
    let a = evaluate_with(&ds, &Oracle { shift: 0.0 }, &cfg.eval, "oracle", 3, "h").unwrap();
    let b = evaluate_with(&ds, &Oracle { shift: 0.0 }, &cfg.eval, "oracle", 3, "h").unwrap();
    assert_eq!(a, b);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = simulate(&cfg, 5.0, 5).unwrap();
    let (tr, va) = training_examples(&ds).unwrap();
    let sched_spec = ScheduleSpec::default();
    let sched = sched_spec.build().unwrap();
    let hyper = TrainHyper { epochs: 4, ..cfg.train.clone() };
    let model_cfg = cfg.model_config();

    let mut full = Denoiser::new(model_cfg.clone(), 1).unwrap();
    let mut full_state = TrainState::new(&hyper, 1);
    train(&mut full, &tr, &va, &sched, &hyper, &mut full_state, |_, _| Ok(())).unwrap();

    let mut saved = None;
    let mut part = Denoiser::new(model_cfg, 1).unwrap();
    let mut part_state = TrainState::new(&hyper, 1);
    let stopped = train(&mut part, &tr, &va, &sched, &hyper, &mut part_state, |m, s| {
        if s.next_epoch == 2 {
            saved = Some(encode_checkpoint(m, &sched_spec, &hyper, s));
            return Err(CdmError::Domain("interrupted".into()));
        }
        Ok(())
    });
    assert!(stopped.is_err());
    let mut ck = checkpoint_from_bytes(&saved.unwrap()).unwrap();
    train(&mut ck.model, &tr, &va, &sched, &hyper, &mut ck.state, |_, _| Ok(())).unwrap();

    assert_eq!(ck.state, full_state);
    assert_eq!(encode_checkpoint(&ck.model, &sched_spec, &hyper, &ck.state), encode_checkpoint(&full, &sched_spec, &hyper, &full_state));
}

#[test]
fn learning_rate_never_drops_below_floor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = simulate(&cfg, 0.0, 6).unwrap();
    let (tr, va) = training_examples(&ds).unwrap();
    let sched = ScheduleSpec::default().build().unwrap();
    let hyper = TrainHyper { epochs: 8, lr0: 1e-3, lr_min: 4e-4, lr_decay_factor: 0.1, min_improvement: 1.0, ..cfg.train.clone() };
    let mut model = Denoiser::new(cfg.model_config(), 2).unwrap();
    let mut state = TrainState::new(&hyper, 2);
    train(&mut model, &tr, &va, &sched, &hyper, &mut state, |_, _| Ok(())).unwrap();
    assert!(state.history.iter().all(|h| h.lr >= hyper.lr_min));
    assert_eq!(state.history.last().unwrap().lr, hyper.lr_min);
}

#[test]
fn training_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.sizes.train = 60;
    cfg.sim.horizon = 10;
    cfg.train = TrainHyper { epochs: 12, batch_size: 32, lr0: 3e-3, lr_decay_factor: 0.5, ..TrainHyper::default() };
    let ds = simulate(&cfg, 0.0, 7).unwrap();
    let (tr, va) = training_examples(&ds).unwrap();
    let sched = cfg.schedule.build().unwrap();
    let mut model = Denoiser::new(cfg.model_config(), 3).unwrap();
    let mut state = TrainState::new(&cfg.train, 3);
    train(&mut model, &tr, &va, &sched, &cfg.train, &mut state, |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = state.history.iter().map(|h| h.train_loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
    assert!(rises <= 3, "{losses:?}");
}

#[test]
fn point_runs_reproduce_their_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_point(&tiny(d.path()), "cdm", 5.0, 3).unwrap();
    }
    let rel = ["data/gamma5_seed3/test_trajectories.cdt", "runs/cdm/gamma5_seed3/losses.csv", "runs/cdm/gamma5_seed3/results.csv"];
    for r in rel {
        assert_eq!(std::fs::read(a.path().join(r)).unwrap(), std::fs::read(b.path().join(r)).unwrap(), "{r}");
    }
    // A second run in place reuses everything and returns the same rows.
    let again = run_point(&tiny(a.path()), "cdm", 5.0, 3).unwrap();
    assert_eq!(again.rows, read_results(&a.path().join("runs/cdm/gamma5_seed3/results.csv")).unwrap());
}

#[test]
fn preconditions_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(cmd_sweep(&ExperimentConfig { gammas: vec![], ..cfg.clone() }), Err(CdmError::Config(_))));
    assert!(matches!(cmd_seedvar(&cfg), Err(CdmError::Config(_))));
    assert!(matches!(cmd_ablate(&ExperimentConfig { ablation: vec![], ..cfg.clone() }), Err(CdmError::Config(_))));
    assert!(matches!(cmd_report(dir.path()), Err(CdmError::Config(_))));
}

#[test]
fn ablation_report_is_complete_and_rebuildable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = cmd_ablate(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    for v in Variant::ALL {
        for &g in &cfg.gammas {
            let n = out.rows.iter().filter(|r| r.method == v.name() && r.gamma == g).count();
            assert_eq!(n, 4, "{} γ={g}", v.name());
        }
    }
    assert!(out.rows.iter().all(|r| r.value >= 0.0 && r.value.is_finite()));

    let report = out.report_dir.join("report.md");
    let md = std::fs::read_to_string(&report).unwrap();
    for v in Variant::ALL {
        assert!(md.contains(v.label()), "{}", v.label());
    }
    let svgs: Vec<_> = std::fs::read_dir(&out.report_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert_eq!(svgs.len(), 4);
    let charts: Vec<String> = svgs.iter().map(|p| std::fs::read_to_string(p).unwrap()).collect();
    for c in &charts {
        let doc = roxmltree::Document::parse(c).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    std::fs::remove_file(&report).unwrap();
    for p in &svgs {
        std::fs::remove_file(p).unwrap();
    }
    cmd_report(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(&report).unwrap(), md);
    for (p, c) in svgs.iter().zip(&charts) {
        assert_eq!(&std::fs::read_to_string(p).unwrap(), c);
    }
}

#[test]
fn seed_report_lists_every_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![0, 1], ..tiny(dir.path()) };
    let out = cmd_seedvar(&cfg).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.rows.len(), 2 * 3 * 4);
    let md = std::fs::read_to_string(out.report_dir.join("report.md")).unwrap();
    for g in ["0", "5", "10"] {
        assert_eq!(md.matches(&format!("| {g} | 2 |")).count(), 4, "{md}");
    }
}
