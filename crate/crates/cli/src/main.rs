//! `cdm`: simulate cohorts, train and evaluate the counterfactual diffusion
//! model, and run the sweep, ablation and seed-variability experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use cdm_core::harness::{self, ExperimentConfig, Scale};
use cdm_core::CdmError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdm", version, about = "Counterfactual outcome distributions with masked diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML file overriding fields of the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for datasets, runs and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated confounding strengths, e.g. `0,5,10`.
    #[arg(long, global = true, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// Reduced cohorts and horizon (default).
    #[arg(long, global = true, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// 10,000 training patients and 60 time steps.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate cohorts and test-set ground-truth counterfactuals.
    Simulate,
    /// Train the denoiser on previously simulated cohorts.
    Train,
    /// Evaluate trained models on every counterfactual cell.
    Evaluate,
    /// Simulate, train and evaluate across γ and write the report.
    Sweep,
    /// Run the ablation variants across γ.
    Ablate,
    /// Repeat the sweep across seeds and report mean and spread.
    Seedvar,
    /// Rebuild Markdown tables and SVG charts from result CSVs.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn config(common: &Common) -> Result<ExperimentConfig, CdmError> {
    let scale = if common.paper_scale { Scale::Paper } else { Scale::Desk };
    let mut cfg = ExperimentConfig::for_scale(scale);
    if let Some(path) = &common.config {
        cfg = ExperimentConfig::load(path, cfg)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(g) = &common.gamma {
        cfg.gammas = g.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CdmError> {
    harness::init_threads()?;
    let cfg = config(&cli.common)?;
    let outcome = match cli.command {
        Command::Simulate => {
            for dir in harness::cmd_simulate(&cfg)? {
                println!("{}", dir.display());
            }
            return Ok(());
        }
        Command::Train => {
            for dir in harness::cmd_train(&cfg)? {
                println!("{}", dir.join("checkpoint.cdck").display());
            }
            return Ok(());
        }
        Command::Evaluate => {
            for r in harness::cmd_evaluate(&cfg)? {
                println!("gamma={} seed={} {}={:.4}", r.gamma, r.seed, r.metric, r.value);
            }
            return Ok(());
        }
        Command::Report => {
            for path in harness::cmd_report(&cfg.out_dir)? {
                println!("{}", path.display());
            }
            return Ok(());
        }
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Sweep => harness::cmd_sweep(&cfg)?,
        Command::Ablate => harness::cmd_ablate(&cfg)?,
        Command::Seedvar => harness::cmd_seedvar(&cfg)?,
    };
    println!("{}", outcome.report_dir.join("report.md").display());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CdmError::Domain(format!("{} experiment point(s) failed; see failures.csv", outcome.failures.len())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
