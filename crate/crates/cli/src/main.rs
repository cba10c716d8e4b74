// SPDX-License-Identifier: Apache-2.0

//! `evgzsl`: data generation, three-phase training, evaluation, sweeps and
//! diagnostics for generalized zero-shot point segmentation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evgzsl_core::experiment::{self, checkpoint_paths, CONFIG_FILE};
use evgzsl_core::pipeline::{load_model, log_file, PHASE1_FILE, PHASE2_FILE, PHASE3_FILE};
use evgzsl_core::selfcheck::{self, SelfCheckOptions};
use evgzsl_core::{metrics, BenchSpec, Calibration, Error, ExperimentManifest, TrainConfig, UBarScope};

#[derive(Parser, Debug)]
#[command(
    name = "evgzsl",
    version,
    about = "Evidence-based dynamic calibration for zero-shot point segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and validate a synthetic benchmark dataset.
    GenData {
        /// Benchmark spec JSON; the acceptance spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        out: Option<PathBuf>,
        /// Print the effective spec with every default filled in and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run one training phase; phase N needs the phase N-1 checkpoint in --out.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3), required_unless_present = "print_config")]
        phase: Option<u8>,
        /// Training config JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        out: Option<PathBuf>,
        /// Print the effective config with every default filled in and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a trained model and write a JSON report.
    Eval {
        #[command(flatten)]
        io: ModelData,
        /// none, static:ETA or dynamic.
        #[arg(long, default_value = "none")]
        calibration: Calibration,
        #[arg(long, value_enum, default_value_t = Scope::Dataset)]
        u_bar_scope: Scope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics over a grid of fixed calibration factors plus the dynamic row, as CSV.
    SweepEta {
        #[command(flatten)]
        io: ModelData,
        /// start:stop:step, inclusive.
        #[arg(long, default_value = "0:1:0.02")]
        grid: String,
        #[arg(long, value_enum, default_value_t = Scope::Dataset)]
        u_bar_scope: Scope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reliability diagram data, confidence histogram and per-class uncertainty.
    Diagnose {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, value_enum, default_value_t = Scope::Dataset)]
        u_bar_scope: Scope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, special-function and Monte-Carlo checks of the numerics.
    Selfcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        gradient_points: usize,
        #[arg(long, default_value_t = 20)]
        mc_cases: usize,
        #[arg(long, default_value_t = 200_000)]
        mc_draws: usize,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ModelData {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scope {
    Dataset,
    Scene,
}

impl From<Scope> for UBarScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Dataset => UBarScope::Dataset,
            Scope::Scene => UBarScope::Scene,
        }
    }
}

/// Raised when selfcheck finds a numerical problem.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} self-check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ChecksFailed>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Domain { .. } | Error::Diverged { .. }) => EXIT_NUMERICAL,
        Some(_) => EXIT_VALIDATION,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            spec,
            out,
            print_config,
        } => {
            let spec = match spec {
                Some(p) => BenchSpec::load(&p)?,
                None => BenchSpec::acceptance(),
            };
            if print_config {
                println!("{}", serde_json::to_string_pretty(&spec)?);
                return Ok(());
            }
            let out = out.expect("required by clap");
            let (dataset, report) = experiment::generate_dataset(&spec, &out)?;
            log::info!(
                "wrote {} train and {} eval scenes to {} ({} checks passed)",
                dataset.train.len(),
                dataset.eval.len(),
                out.display(),
                report.checks_run.len()
            );
        }
        Command::Train {
            phase,
            config,
            data,
            out,
            print_config,
        } => {
            let config = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if print_config {
                println!("{}", serde_json::to_string_pretty(&config)?);
                return Ok(());
            }
            let (phase, data, out) = (
                phase.expect("required by clap"),
                data.expect("required by clap"),
                out.expect("required by clap"),
            );
            let dataset = experiment::load_validated(&data)?;
            let history = experiment::train_phase(phase, &config, &dataset, &out)?;
            if let Some(last) = history.last() {
                log::info!(
                    "phase {phase} finished after {} epochs: {:?}",
                    history.len(),
                    last.losses
                );
            }
            let checkpoints: Vec<PathBuf> = [PHASE1_FILE, PHASE2_FILE, PHASE3_FILE][..usize::from(phase)]
                .iter()
                .map(|f| out.join(f))
                .collect();
            let mut artifacts: Vec<PathBuf> = (1..=phase).map(|p| out.join(log_file(p))).collect();
            artifacts.retain(|p| p.exists());
            artifacts.push(out.join(CONFIG_FILE));
            write_manifest(&out.join("manifest.json"), &config, &data, &checkpoints, &artifacts)?;
        }
        Command::Eval {
            io,
            calibration,
            u_bar_scope,
            out,
        } => {
            let (model, dataset) = load_pair(&io)?;
            let report = experiment::evaluate(&model, &dataset, calibration, u_bar_scope.into())?;
            experiment::write_json(&out, &report)?;
            log::info!(
                "{calibration}: seen mIoU {:.4}, unseen mIoU {:.4}, HmIoU {:.4}",
                report.scores.miou_seen,
                report.scores.miou_unseen,
                report.scores.hmiou
            );
            artifact_manifest(&io, &out)?;
        }
        Command::SweepEta {
            io,
            grid,
            u_bar_scope,
            out,
        } => {
            let grid = metrics::parse_grid(&grid)?;
            let (model, dataset) = load_pair(&io)?;
            let pred = experiment::predict(&model, &dataset.eval)?;
            let rows = experiment::sweep(&pred, &dataset.catalog, &grid, u_bar_scope.into())?;
            metrics::write_sweep_csv(&out, &rows)?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
            artifact_manifest(&io, &out)?;
        }
        Command::Diagnose { io, u_bar_scope, out } => {
            let (model, dataset) = load_pair(&io)?;
            let pred = experiment::predict(&model, &dataset.eval)?;
            let diagnosis = experiment::diagnose(&pred, &dataset.catalog, u_bar_scope.into())?;
            experiment::write_json(&out, &diagnosis)?;
            log::info!(
                "mean u: seen {:.4}, unseen {:.4}; ECE {:.4}",
                diagnosis.mean_uncertainty_seen,
                diagnosis.mean_uncertainty_unseen,
                diagnosis.reliability.expected_calibration_error
            );
            artifact_manifest(&io, &out)?;
        }
        Command::Selfcheck {
            seed,
            gradient_points,
            mc_cases,
            mc_draws,
            out,
        } => {
            let options = SelfCheckOptions {
                seed,
                gradient_points,
                mc_cases,
                mc_draws,
            };
            let report = selfcheck::run(&options)?;
            for c in &report.checks {
                println!(
                    "{:<4} {:<12} {:<36} {:>12.3e} < {:<8.1e}",
                    if c.passed { "ok" } else { "FAIL" },
                    c.group,
                    c.name,
                    c.measured,
                    c.tolerance
                );
            }
            if let Some(out) = out {
                experiment::write_json(&out, &report)?;
            }
            let failed = report.failures().count();
            if failed > 0 {
                bail!(ChecksFailed(failed));
            }
        }
    }
    Ok(())
}

fn load_pair(io: &ModelData) -> anyhow::Result<(evgzsl_core::ModelParameters, evgzsl_core::Dataset)> {
    let model = load_model(&io.model).with_context(|| format!("loading model from {}", io.model.display()))?;
    let dataset = experiment::load_validated(&io.data)?;
    model.check_dims(&dataset.catalog)?;
    if model.encoder.mlp.inputs() != dataset.point_dim() {
        return Err(Error::Validation(vec![format!(
            "model expects {}-dimensional points, dataset has {}",
            model.encoder.mlp.inputs(),
            dataset.point_dim()
        )])
        .into());
    }
    Ok((model, dataset))
}

/// Writes `<artifact stem>.manifest.json` next to an eval, sweep or
/// diagnose output.
fn artifact_manifest(io: &ModelData, artifact: &Path) -> anyhow::Result<()> {
    let config = TrainConfig::load(&io.model.join(CONFIG_FILE))?;
    let path = artifact.with_extension("manifest.json");
    write_manifest(
        &path,
        &config,
        &io.data,
        &checkpoint_paths(&io.model),
        &[artifact.to_path_buf()],
    )
}

fn write_manifest(
    path: &Path,
    config: &TrainConfig,
    data: &Path,
    checkpoints: &[PathBuf],
    artifacts: &[PathBuf],
) -> anyhow::Result<()> {
    let manifest = ExperimentManifest::build(config, data, checkpoints, artifacts)?;
    experiment::write_json(path, &manifest)?;
    log::debug!("manifest {} ({})", path.display(), manifest.hash());
    Ok(())
}
