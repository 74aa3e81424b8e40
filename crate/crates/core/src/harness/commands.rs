//! The experiment commands behind the command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::pipeline::{dataset_dir, ensure_dataset, evaluate_point, load_point, run_dir, run_point, train_point};
use super::plot::{line_chart, Series};
use super::results::{read_csv, read_results, write_csv, ResultRow, Summary, Timing, METRICS};
use crate::data_io::{read_dataset, write_atomic};
use crate::error::{CdmError, Result};

/// A point that failed without stopping its sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub gamma: f64,
    pub seed: u64,
    pub method: String,
    pub error: String,
}

/// Which report a results directory holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Sweep,
    Ablation,
    SeedVariability,
}

impl ReportKind {
    pub const ALL: [ReportKind; 3] = [ReportKind::Sweep, ReportKind::Ablation, ReportKind::SeedVariability];

    pub fn dir_name(self) -> &'static str {
        match self {
            ReportKind::Sweep => "sweep",
            ReportKind::Ablation => "ablation",
            ReportKind::SeedVariability => "seedvar",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    pub report_dir: PathBuf,
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        for &gamma in &cfg.gammas {
            ensure_dataset(cfg, gamma, seed)?;
            dirs.push(dataset_dir(cfg, gamma, seed));
        }
    }
    Ok(dirs)
}

/// Trains the configured model on every existing `(γ, seed)` dataset.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        for &gamma in &cfg.gammas {
            let ds = read_dataset(&dataset_dir(cfg, gamma, seed))?;
            let dir = run_dir(cfg, Variant::Cdm.name(), gamma, seed);
            train_point(cfg, &ds, &dir, seed)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// Evaluates every trained `(γ, seed)` model on its test cohort.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &gamma in &cfg.gammas {
            let method = Variant::Cdm.name();
            let (ds, ck) = load_point(cfg, method, gamma, seed)?;
            rows.extend(evaluate_point(cfg, &ds, &ck, &run_dir(cfg, method, gamma, seed), method, seed)?);
        }
    }
    Ok(rows)
}

/// Runs every `(variant, γ, seed)` point, isolating failures, then writes
/// the combined CSVs and the report into `out_dir/<kind>`.
fn run_grid(cfg: &ExperimentConfig, variants: &[Variant], kind: ReportKind) -> Result<SweepOutcome> {
    let mut out = SweepOutcome { report_dir: cfg.out_dir.join(kind.dir_name()), ..Default::default() };
    let mut timings = Vec::new();
    for &variant in variants {
        let vcfg = variant.apply(cfg);
        vcfg.validate()?;
        for &seed in &cfg.seeds {
            for &gamma in &cfg.gammas {
                log::info!("point {} γ={gamma} seed={seed}", variant.name());
                match run_point(&vcfg, variant.name(), gamma, seed) {
                    Ok(p) => {
                        out.rows.extend(p.rows);
                        timings.extend(p.timings);
                    }
                    Err(e) => {
                        log::error!("{} γ={gamma} seed={seed} failed: {e}", variant.name());
                        out.failures.push(Failure { gamma, seed, method: variant.name().into(), error: e.to_string() });
                    }
                }
            }
        }
    }
    let dir = &out.report_dir;
    write_csv(&dir.join("results.csv"), &out.rows)?;
    write_csv(&dir.join("failures.csv"), &out.failures)?;
    write_csv::<Timing>(&dir.join("timings.csv"), &timings)?;
    write_report(dir, kind)?;
    Ok(out)
}

/// γ sweep of the full model.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    run_grid(cfg, &[Variant::Cdm], ReportKind::Sweep)
}

/// Every configured ablation variant at every γ.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.ablation.is_empty() {
        return Err(CdmError::Config("ablation variant list is empty".into()));
    }
    run_grid(cfg, &cfg.ablation, ReportKind::Ablation)
}

/// The full model repeated across seeds.
pub fn cmd_seedvar(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.seeds.len() < 2 {
        return Err(CdmError::Config("seed variability needs at least two seeds".into()));
    }
    run_grid(cfg, &[Variant::Cdm], ReportKind::SeedVariability)
}

/// Regenerates every report found under `out_dir` from its CSV files.
pub fn cmd_report(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for kind in ReportKind::ALL {
        let dir = out_dir.join(kind.dir_name());
        if dir.join("results.csv").exists() {
            write_report(&dir, kind)?;
            written.push(dir.join("report.md"));
        }
    }
    if written.is_empty() {
        return Err(CdmError::Config(format!("no results.csv found under {}", out_dir.display())));
    }
    Ok(written)
}

fn method_label(method: &str) -> String {
    Variant::from_name(method).map_or_else(|| method.to_string(), |v| v.label().to_string())
}

/// Writes `report.md` and the SVG charts of `dir` using only its CSV files.
pub fn write_report(dir: &Path, kind: ReportKind) -> Result<()> {
    let rows = read_results(&dir.join("results.csv"))?;
    let failures: Vec<Failure> = if dir.join("failures.csv").exists() {
        read_csv(&dir.join("failures.csv"))?
    } else {
        Vec::new()
    };
    let summary = Summary::new(&rows);
    let mut md = String::new();
    match kind {
        ReportKind::Sweep => {
            md.push_str("# Counterfactual prediction under time-dependent confounding\n\n");
            md.push_str("Errors in % of V_max; mean ± std over seeds where more than one seed ran.\n\n");
            md.push_str(&summary.metric_tables());
        }
        ReportKind::Ablation => {
            md.push_str("# Ablation of design choices\n\n");
            md.push_str("Errors in % of V_max; mean ± std over seeds where more than one seed ran.\n\n");
            md.push_str(&summary.method_tables(method_label));
        }
        ReportKind::SeedVariability => {
            md.push_str("# Variability across seeds\n\n");
            md.push_str(&summary.seed_table());
        }
    }
    if !failures.is_empty() {
        md.push_str("## Failed points\n\n| method | γ | seed | error |\n|---|---:|---:|---|\n");
        for f in &failures {
            let _ = writeln!(md, "| {} | {} | {} | {} |", f.method, f.gamma, f.seed, f.error.replace('|', "\\|"));
        }
        md.push('\n');
    }
    write_atomic(&dir.join("report.md"), md.as_bytes())?;

    for metric in METRICS {
        let series: Vec<Series> = summary
            .methods
            .iter()
            .map(|m| Series {
                label: method_label(m),
                points: summary
                    .gammas
                    .iter()
                    .filter_map(|&g| summary.mean(m, metric, g).map(|v| (g, v)))
                    .collect(),
            })
            .collect();
        let svg = line_chart(metric, "confounding γ", "% of V_max", &series);
        write_atomic(&dir.join(format!("{metric}.svg")), svg.as_bytes())?;
    }
    Ok(())
}
