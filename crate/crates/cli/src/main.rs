mod manifest;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rangekit::check::{self, CheckOptions, ReplayFile};
use rangekit::data::{generate, save_dataset, truncate_tail, DatasetSpec};
use rangekit::trainer::report::RunStatus;

use crate::manifest::{expand_tail_sweep, load_manifest};

/// Exit code for invalid input (manifest, flags, files).
const EXIT_INVALID: u8 = 1;
/// Exit code when a training variant aborted or a check failed.
const EXIT_FAILED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "rangekit", version, about = "Range-loss metric learning experiments on synthetic long-tail data")]
struct Cli {
    /// Worker threads for independent variants (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every variant of a manifest.
    Run {
        manifest: PathBuf,
        /// Output directory (overrides the manifest's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace existing variant directories.
        #[arg(long)]
        force: bool,
    },
    /// Train every manifest variant at each tail truncation ratio.
    SweepTail {
        manifest: PathBuf,
        /// Comma-separated ratios in [0, 1].
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        ratios: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run geometry oracles, gradient checks and sampler checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Re-run a failure file written by a previous check.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Where to write the first failing case.
        #[arg(long, default_value = "check_failure.json")]
        failure_out: PathBuf,
        /// Scale the analytic intra gradient by 1 + x (mutation test hook).
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb_intra: f64,
    },
    /// Generate a synthetic dataset from a TOML spec and write it as text.
    ExportDataset {
        spec: PathBuf,
        path: PathBuf,
        /// Fraction of poor identities to drop before writing.
        #[arg(long, default_value_t = 0.0)]
        tail_ratio: f64,
        #[arg(long)]
        force: bool,
    },
}

enum Outcome {
    Ok,
    Failed,
}

fn cmd_run(manifest: &Path, out: Option<PathBuf>, force: bool, ratios: Option<&[f64]>) -> anyhow::Result<Outcome> {
    let m = load_manifest(manifest)?;
    let variants = match ratios {
        Some(r) => expand_tail_sweep(&m, r)?,
        None => m.variants.clone(),
    };
    let root = out.unwrap_or_else(|| m.output_dir.clone());
    log::info!("manifest {}: {} variant(s) -> {}", m.name, variants.len(), root.display());
    run::prepare_output(&root, &variants, force)?;
    let outcomes = run::run_variants(&root, &variants)?;
    if ratios.is_some() {
        run::write_tail_report(&root, &outcomes)?;
    }
    for o in &outcomes {
        let r = &o.row;
        match (r.status, r.verification_accuracy) {
            (RunStatus::Completed, Some(acc)) => println!(
                "{:<24} {:<12} ratio {:<5} acc {acc:.4}  intra range {:.4}  min center sq {:.4}",
                r.variant,
                r.loss,
                r.tail_ratio,
                r.mean_intra_range.unwrap_or(f64::NAN),
                r.min_center_sq.unwrap_or(f64::NAN)
            ),
            (RunStatus::Completed, None) => println!("{:<24} {:<12} completed, no metrics recorded", r.variant, r.loss),
            (RunStatus::Aborted, _) => println!(
                "{:<24} {:<12} ABORTED after {} iterations (partial output): {}",
                r.variant,
                r.loss,
                r.iterations_completed,
                o.error.as_deref().unwrap_or("")
            ),
        }
    }
    println!("reports written to {}", root.display());
    Ok(if outcomes.iter().any(|o| o.row.status == RunStatus::Aborted) {
        Outcome::Failed
    } else {
        Outcome::Ok
    })
}

fn cmd_check(seed: u64, replay: Option<PathBuf>, failure_out: &Path, perturb_intra: f64) -> anyhow::Result<Outcome> {
    if let Some(path) = replay {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: ReplayFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let outcome = check::replay(&file)?;
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{status} {} (replay): {}", file.property, outcome.detail);
        if outcome == file.outcome {
            println!("outcome identical to the recorded one");
        } else {
            println!("outcome differs from the recorded one: {}", file.outcome.detail);
        }
        return Ok(if outcome.passed { Outcome::Ok } else { Outcome::Failed });
    }

    let opts = CheckOptions {
        seed,
        perturb_intra,
        ..CheckOptions::default()
    };
    let results = check::run_checks(&opts)?;
    let mut first_failure = None;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {} ({} cases): {}", r.name, r.cases, r.detail);
        if !r.passed && first_failure.is_none() {
            first_failure = Some(r);
        }
    }
    match first_failure {
        None => Ok(Outcome::Ok),
        Some(r) => {
            let case = r.failing_case.clone().expect("failing property records its case");
            let outcome = check::evaluate_case(&case, perturb_intra)?;
            let file = ReplayFile {
                property: r.name.clone(),
                perturb_intra,
                case,
                outcome,
            };
            std::fs::write(failure_out, serde_json::to_string_pretty(&file)?)
                .with_context(|| format!("writing {}", failure_out.display()))?;
            println!("first failing case written to {}", failure_out.display());
            Ok(Outcome::Failed)
        }
    }
}

fn cmd_export(spec: &Path, path: &Path, tail_ratio: f64, force: bool) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: DatasetSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    if path.exists() && !force {
        anyhow::bail!("{} exists (pass --force to overwrite)", path.display());
    }
    let full = generate(&spec)?;
    let ds = truncate_tail(&full, tail_ratio, spec.seed)?;
    save_dataset(&ds, path)?;
    println!("{} samples of {} identities written to {}", ds.len(), ds.identities().len(), path.display());
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RANGEKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    }
    let result = match cli.command {
        Command::Run { manifest, out, force } => cmd_run(&manifest, out, force, None),
        Command::SweepTail { manifest, ratios, out, force } => cmd_run(&manifest, out, force, Some(&ratios)),
        Command::Check {
            seed,
            replay,
            failure_out,
            perturb_intra,
        } => cmd_check(seed, replay, &failure_out, perturb_intra),
        Command::ExportDataset { spec, path, tail_ratio, force } => cmd_export(&spec, &path, tail_ratio, force),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
