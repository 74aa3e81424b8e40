//! One experiment point: simulate a cohort, train a denoiser, evaluate it on
//! every counterfactual cell of the test cohort.
//!
//! Every stage leaves its artifacts on disk together with a key describing
//! the inputs that produced them; a later run with the same key reuses them
//! (or resumes an unfinished training run) instead of recomputing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{gamma_tag, CohortSizes, EvalConfig, ExperimentConfig, TuningGrid};
use super::results::{metric_level, read_csv, write_csv, ResultRow, Timing, METRICS};
use crate::data_io::assemble::{denormalize_volume, eval_example, one_step_examples, NUM_FEATURES, VOLUME};
use crate::data_io::{
    config_hash, encode_checkpoint, read_checkpoint, read_dataset, write_atomic, write_dataset, write_toml,
    Checkpoint, CounterfactualSet, Dataset,
};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{sample_reverse_clipped, train, EpsModel, NoiseSchedule, ScheduleSpec, SequenceSet, TrainHyper, TrainState};
use crate::error::{CdmError, Result};
use crate::metrics::{rmse_from_quantile, wasserstein1};
use crate::rng::{stream, sub_seed, CdmRng};
use crate::sim::{cohort_counterfactuals, generate_cohort, TreatmentChoice};

pub fn dataset_dir(cfg: &ExperimentConfig, gamma: f64, seed: u64) -> PathBuf {
    cfg.out_dir.join("data").join(format!("gamma{}_seed{seed}", gamma_tag(gamma)))
}

pub fn run_dir(cfg: &ExperimentConfig, method: &str, gamma: f64, seed: u64) -> PathBuf {
    cfg.out_dir.join("runs").join(method).join(format!("gamma{}_seed{seed}", gamma_tag(gamma)))
}

fn expected_manifest(cfg: &ExperimentConfig, gamma: f64, seed: u64) -> crate::data_io::DatasetManifest {
    let s = cfg.sizes;
    Dataset::manifest_for(&cfg.simulator(gamma), [s.train, s.val, s.test], seed, cfg.eval.truth_samples)
}

/// Simulates the three cohorts and the test-set ground truth in memory.
pub fn simulate(cfg: &ExperimentConfig, gamma: f64, seed: u64) -> Result<Dataset> {
    let sim = cfg.simulator(gamma);
    let CohortSizes { train, val, test } = cfg.sizes;
    let cohort_seed = sub_seed(seed, "cohort");
    let train_set = generate_cohort(&sim, train, cohort_seed, 0)?;
    let val_set = generate_cohort(&sim, val, cohort_seed, train)?;
    let test_set = generate_cohort(&sim, test, cohort_seed, train + val)?;
    let cells = cohort_counterfactuals(&test_set, &sim, cfg.eval.truth_samples, sub_seed(seed, "counterfactual"))?;
    let counterfactuals = CounterfactualSet::from_cells(&cells, sim.horizon - 1, cfg.eval.truth_samples);
    Ok(Dataset {
        manifest: expected_manifest(cfg, gamma, seed),
        sim,
        train: train_set,
        val: val_set,
        test: test_set,
        counterfactuals,
    })
}

/// Simulates and writes the dataset for `(γ, seed)`, unless an identical one
/// is already on disk. The returned dataset is always the one read back from
/// disk, so later stages see exactly the stored (32-bit) values.
pub fn ensure_dataset(cfg: &ExperimentConfig, gamma: f64, seed: u64) -> Result<Dataset> {
    let dir = dataset_dir(cfg, gamma, seed);
    if let Ok(ds) = read_dataset(&dir) {
        if ds.manifest == expected_manifest(cfg, gamma, seed) {
            log::info!("reusing dataset {}", dir.display());
            return Ok(ds);
        }
    }
    log::info!("simulating γ={gamma} seed={seed} into {}", dir.display());
    write_dataset(&dir, &simulate(cfg, gamma, seed)?)?;
    read_dataset(&dir)
}

/// Inputs that determine a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainKey {
    dataset_hash: String,
    dataset_seed: u64,
    sizes: CohortSizes,
    model: DenoiserConfig,
    hyper: TrainHyper,
    schedule: ScheduleSpec,
    tuning: TuningGrid,
    seed: u64,
}

/// Inputs that determine an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalKey {
    train: TrainKey,
    eval: EvalConfig,
}

fn train_key(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> TrainKey {
    TrainKey {
        dataset_hash: ds.manifest.config_hash.clone(),
        dataset_seed: ds.manifest.seed,
        sizes: cfg.sizes,
        model: cfg.model_config(),
        hyper: cfg.train.clone(),
        schedule: cfg.schedule,
        tuning: cfg.tuning.clone(),
        seed,
    }
}

/// Hash identifying everything behind one evaluated experiment point.
pub fn point_hash(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> String {
    config_hash(&EvalKey { train: train_key(cfg, ds, seed), eval: cfg.eval.clone() })
}

/// Byte comparison, so a key written before a field existed never matches
/// through serde defaults.
fn key_matches<T: serde::Serialize>(path: &Path, key: &T) -> bool {
    match (std::fs::read_to_string(path), toml::to_string_pretty(key)) {
        (Ok(stored), Ok(fresh)) => stored == fresh,
        _ => false,
    }
}

pub fn training_examples(ds: &Dataset) -> Result<(SequenceSet, SequenceSet)> {
    let v_max = ds.manifest.v_max;
    let (train_set, skipped_t) = one_step_examples(&ds.train, v_max);
    let (val_set, skipped_v) = one_step_examples(&ds.val, v_max);
    if skipped_t + skipped_v > 0 {
        log::warn!("skipped {skipped_t} training and {skipped_v} validation trajectories shorter than two steps");
    }
    Ok((train_set, val_set))
}

/// Trains (or resumes) a single model in `dir`, checkpointing after every epoch.
fn train_single(
    model_cfg: DenoiserConfig,
    hyper: &TrainHyper,
    schedule: ScheduleSpec,
    sets: &(SequenceSet, SequenceSet),
    dir: &Path,
    seed: u64,
) -> Result<Checkpoint> {
    let ck_path = dir.join("checkpoint.cdck");
    let sched = schedule.build()?;
    let mut ck = match read_checkpoint(&ck_path) {
        Ok(ck) if ck.model.config == model_cfg && ck.hyper == *hyper && ck.schedule == schedule => ck,
        _ => Checkpoint {
            model: Denoiser::new(model_cfg, sub_seed(seed, "model"))?,
            schedule,
            hyper: hyper.clone(),
            state: TrainState::new(hyper, sub_seed(seed, "train")),
        },
    };
    if ck.state.finished(hyper) {
        return Ok(ck);
    }
    if ck.state.next_epoch > 0 {
        log::info!("resuming {} at epoch {}", dir.display(), ck.state.next_epoch);
    }
    let losses = dir.join("losses.csv");
    train(&mut ck.model, &sets.0, &sets.1, &sched, hyper, &mut ck.state, |model, state| {
        write_atomic(&ck_path, &encode_checkpoint(model, &schedule, hyper, state))?;
        write_csv(&losses, &state.history)
    })?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TuningRow {
    lr0: f64,
    embed_dim: usize,
    best_val: f64,
}

/// Trains the model for one experiment point into `dir`. With a tuning grid,
/// every `(lr0, embed_dim)` candidate is trained and the one with the lowest
/// validation loss is kept.
pub fn train_point(cfg: &ExperimentConfig, ds: &Dataset, dir: &Path, seed: u64) -> Result<Checkpoint> {
    let key = train_key(cfg, ds, seed);
    let key_path = dir.join("train_key.toml");
    if !key_matches(&key_path, &key) {
        for stale in ["checkpoint.cdck", "losses.csv", "results.csv", "eval_key.toml", "tuning.csv"] {
            let _ = std::fs::remove_file(dir.join(stale));
        }
        let _ = std::fs::remove_dir_all(dir.join("tuning"));
        write_toml(&key_path, &key)?;
    }
    let sets = training_examples(ds)?;
    let lrs = if cfg.tuning.lr0.is_empty() { vec![cfg.train.lr0] } else { cfg.tuning.lr0.clone() };
    let dims = if cfg.tuning.embed_dim.is_empty() { vec![cfg.model.embed_dim] } else { cfg.tuning.embed_dim.clone() };
    if lrs.len() * dims.len() == 1 {
        let hyper = TrainHyper { lr0: lrs[0], ..cfg.train.clone() };
        let model = DenoiserConfig { embed_dim: dims[0], ..cfg.model_config() };
        return train_single(model, &hyper, cfg.schedule, &sets, dir, seed);
    }
    let mut best: Option<Checkpoint> = None;
    let mut table = Vec::new();
    for &lr0 in &lrs {
        for &embed_dim in &dims {
            let hyper = TrainHyper { lr0, ..cfg.train.clone() };
            let model = DenoiserConfig { embed_dim, ..cfg.model_config() };
            let sub = dir.join("tuning").join(format!("lr{lr0}_embed{embed_dim}"));
            let ck = train_single(model, &hyper, cfg.schedule, &sets, &sub, seed)?;
            let best_val = ck.state.best_val.unwrap_or(f64::INFINITY);
            log::info!("tuning lr0={lr0} embed_dim={embed_dim}: best validation loss {best_val:.5}");
            table.push(TuningRow { lr0, embed_dim, best_val });
            if best.as_ref().is_none_or(|b| best_val < b.state.best_val.unwrap_or(f64::INFINITY)) {
                best = Some(ck);
            }
        }
    }
    write_csv(&dir.join("tuning.csv"), &table)?;
    let best = best.expect("tuning grid is nonempty");
    write_atomic(&dir.join("checkpoint.cdck"), &crate::data_io::store::checkpoint_bytes(&best))?;
    write_csv(&dir.join("losses.csv"), &best.state.history)?;
    Ok(best)
}

/// Address of one counterfactual cell: test patient index, decision step, choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub patient: usize,
    pub t: usize,
    pub choice: TreatmentChoice,
}

/// Every `(patient, t, choice)` with `t + 1 < active_len`: `(active_len − 1) × 4` per patient.
pub fn cell_keys(ds: &Dataset) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for (patient, p) in ds.test.iter().enumerate() {
        for t in 0..p.trajectory.active_len.saturating_sub(1) {
            keys.extend(TreatmentChoice::ALL.map(|choice| CellKey { patient, t, choice }));
        }
    }
    keys
}

/// Produces volume samples (cm³) for counterfactual cells.
pub trait CellSampler: Sync {
    fn sample_cells(&self, ds: &Dataset, cells: &[CellKey], n: usize, rng: &mut CdmRng) -> Result<Vec<Vec<f64>>>;
}

/// Samples cells by reverse diffusion from a trained noise predictor.
pub struct DiffusionSampler<'a, M: EpsModel> {
    pub model: &'a M,
    pub schedule: &'a NoiseSchedule,
    /// Range for the clean-estimate clamp, in normalised units.
    pub clip: Option<(f64, f64)>,
}

impl<M: EpsModel> CellSampler for DiffusionSampler<'_, M> {
    fn sample_cells(&self, ds: &Dataset, cells: &[CellKey], n: usize, rng: &mut CdmRng) -> Result<Vec<Vec<f64>>> {
        let v_max = ds.manifest.v_max;
        let items = cells
            .iter()
            .map(|c| {
                let p = &ds.test[c.patient];
                eval_example(&p.trajectory, p.params.stage, c.t, c.choice, v_max)
            })
            .collect::<Result<Vec<_>>>()?;
        let set = SequenceSet { f: NUM_FEATURES, items };
        let batch = set.collate(&(0..cells.len()).collect::<Vec<_>>());
        let draws = sample_reverse_clipped(self.model, &batch, self.schedule, n, self.clip, rng)?;
        Ok(cells
            .iter()
            .enumerate()
            .map(|(i, c)| draws.iter().map(|d| denormalize_volume(d.get(i, c.t + 1, VOLUME), v_max)).collect())
            .collect())
    }
}

/// Model samples for every cell, drawn in fixed-size chunks with one random
/// stream per chunk so that the result does not depend on the thread count.
pub fn draw_samples<S: CellSampler + ?Sized>(
    ds: &Dataset,
    keys: &[CellKey],
    sampler: &S,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[CellKey]> = keys.chunks(eval.cells_per_batch).collect();
    let total = chunks.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let per_chunk = chunks
        .par_iter()
        .enumerate()
        .map(|(i, chunk)| {
            let out = sampler.sample_cells(ds, chunk, eval.model_samples, &mut stream(seed, i as u64));
            let d = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if d % 20 == 0 || d == total {
                log::info!("sampled {d}/{total} cell batches");
            }
            out
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// The four metrics over all cells, as `(metric, value)`.
pub fn score(ds: &Dataset, keys: &[CellKey], pred: &[Vec<f64>], eval: &EvalConfig) -> Result<Vec<(&'static str, f64)>> {
    let mut truth = Vec::with_capacity(keys.len());
    let mut gaps = Vec::new();
    for c in keys {
        match ds.counterfactuals.cell(c.patient, c.t, c.choice) {
            Some(s) => truth.push(s.to_vec()),
            None => gaps.push(format!("({}, {}, {})", c.patient, c.t, c.choice.name())),
        }
    }
    if !gaps.is_empty() {
        let shown = gaps.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        return Err(CdmError::Domain(format!("{} counterfactual cells lack ground truth: {shown}", gaps.len())));
    }
    let mask = vec![true; keys.len()];
    let v_max = ds.manifest.v_max;
    METRICS
        .iter()
        .map(|&m| {
            let v = match metric_level(m) {
                Some(level) => rmse_from_quantile(pred, &truth, &mask, level, v_max)?,
                None => wasserstein1(pred, &truth, &mask, eval.quantiles, v_max, eval.w1_norm)?,
            };
            Ok((m, v))
        })
        .collect()
}

/// Samples and scores every counterfactual cell, producing one row per metric.
pub fn evaluate_with<S: CellSampler + ?Sized>(
    ds: &Dataset,
    sampler: &S,
    eval: &EvalConfig,
    method: &str,
    seed: u64,
    hash: &str,
) -> Result<Vec<ResultRow>> {
    let keys = cell_keys(ds);
    log::info!("evaluating {} cells × {} samples", keys.len(), eval.model_samples);
    let pred = draw_samples(ds, &keys, sampler, eval, sub_seed(seed, "eval"))?;
    Ok(score(ds, &keys, &pred, eval)?
        .into_iter()
        .map(|(metric, value)| ResultRow {
            gamma: ds.manifest.gamma,
            seed,
            method: method.to_string(),
            metric: metric.to_string(),
            level: metric_level(metric),
            value,
            config_hash: hash.to_string(),
        })
        .collect())
}

/// Evaluates a checkpoint and writes `results.csv` next to it.
pub fn evaluate_point(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    ck: &Checkpoint,
    dir: &Path,
    method: &str,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let key = EvalKey { train: train_key(cfg, ds, seed), eval: cfg.eval.clone() };
    let key_path = dir.join("eval_key.toml");
    let results = dir.join("results.csv");
    if key_matches(&key_path, &key) {
        if let Ok(rows) = super::results::read_results(&results) {
            log::info!("reusing evaluation {}", results.display());
            return Ok(rows);
        }
    }
    let sched = ck.schedule.build()?;
    let clip = cfg.eval.clip_volume.then_some((0.0, 1.0));
    let sampler = DiffusionSampler { model: &ck.model, schedule: &sched, clip };
    let rows = evaluate_with(ds, &sampler, &cfg.eval, method, seed, &config_hash(&key))?;
    write_csv(&results, &rows)?;
    write_toml(&key_path, &key)?;
    Ok(rows)
}

/// Result rows and stage timings of one experiment point.
#[derive(Debug, Clone, Default)]
pub struct PointOutcome {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<Timing>,
}

/// Simulate → train → evaluate for `(method, γ, seed)`.
pub fn run_point(cfg: &ExperimentConfig, method: &str, gamma: f64, seed: u64) -> Result<PointOutcome> {
    let mut timings = Vec::new();
    let mut timed = |stage: &str, start: Instant| {
        timings.push(Timing {
            gamma,
            seed,
            method: method.to_string(),
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let start = Instant::now();
    let ds = ensure_dataset(cfg, gamma, seed)?;
    timed("simulate", start);
    let dir = run_dir(cfg, method, gamma, seed);
    let start = Instant::now();
    let ck = train_point(cfg, &ds, &dir, seed)?;
    timed("train", start);
    let start = Instant::now();
    let rows = evaluate_point(cfg, &ds, &ck, &dir, method, seed)?;
    timed("evaluate", start);
    Ok(PointOutcome { rows, timings })
}

/// The stored dataset and trained checkpoint for `(method, γ, seed)`.
pub fn load_point(cfg: &ExperimentConfig, method: &str, gamma: f64, seed: u64) -> Result<(Dataset, Checkpoint)> {
    let ds = read_dataset(&dataset_dir(cfg, gamma, seed))?;
    let ck = read_checkpoint(&run_dir(cfg, method, gamma, seed).join("checkpoint.cdck"))?;
    Ok((ds, ck))
}

/// Reads a loss history written during training.
pub fn read_losses(dir: &Path) -> Result<Vec<crate::diffusion::EpochRecord>> {
    read_csv(&dir.join("losses.csv"))
}
