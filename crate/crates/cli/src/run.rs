//! Running manifest variants and writing their reports.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rangekit::trainer::report::{write_metrics_csv, write_summary_json, RunStatus, RunSummary};
use rangekit::trainer::{TrainError, Trainer};
use rangekit::{LossMode, MetricsRecord};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::Variant;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const TAIL_REPORT_FILE: &str = "tail_report.csv";

/// One row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub loss: LossMode,
    pub tail_ratio: f64,
    pub status: RunStatus,
    pub iterations_completed: u64,
    pub margin: f64,
    pub verification_accuracy: Option<f64>,
    pub mean_intra_range: Option<f64>,
    pub min_center_sq: Option<f64>,
    pub softmax_loss: Option<f64>,
    pub total_loss: Option<f64>,
}

/// One row of `tail_report.csv`, keyed by (loss, tail_ratio).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRow {
    pub loss: LossMode,
    pub tail_ratio: f64,
    pub variant: String,
    pub status: RunStatus,
    pub verification_accuracy: Option<f64>,
    pub mean_intra_range: Option<f64>,
    pub min_center_sq: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub row: ComparisonRow,
    pub error: Option<String>,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Checks that no variant directory exists, or removes them all if `force`.
pub fn prepare_output(root: &Path, variants: &[Variant], force: bool) -> anyhow::Result<()> {
    let existing: Vec<PathBuf> = variants.iter().map(|v| root.join(&v.name)).filter(|p| p.exists()).collect();
    if !existing.is_empty() && !force {
        let list: Vec<String> = existing.iter().map(|p| p.display().to_string()).collect();
        bail!("output already exists (pass --force to overwrite): {}", list.join(", "));
    }
    for p in existing {
        std::fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
    }
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    Ok(())
}

fn run_variant(root: &Path, variant: &Variant) -> anyhow::Result<VariantOutcome> {
    let dir = root.join(&variant.name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut config = variant.config.clone();
    if let Some(ck) = &config.checkpoint {
        if ck.is_relative() {
            config.checkpoint = Some(dir.join(ck));
        }
    }
    serde_json::to_writer_pretty(create(&dir.join(CONFIG_FILE))?, &config)?;

    log::info!("variant {}: {} iterations, loss {}", variant.name, config.iterations, config.loss);
    let start = Instant::now();
    let trainer = Trainer::new(config.clone()).with_context(|| format!("variant {}", variant.name))?;
    let (train_ids, train_samples) = (trainer.train_set.identities().len(), trainer.train_set.len());
    let margin = trainer.margin;
    let (history, status, error) = match trainer.run() {
        Ok(run) => (run.history, RunStatus::Completed, None),
        Err(TrainError::Aborted { source, history }) => (history, RunStatus::Aborted, Some(source.to_string())),
        Err(TrainError::Setup(e)) => return Err(anyhow::Error::new(e).context(format!("variant {}", variant.name))),
    };
    let wall = start.elapsed().as_secs_f64();

    write_metrics_csv(&history, create(&dir.join(METRICS_FILE))?)?;
    let last: Option<MetricsRecord> = history.last().copied();
    let summary = RunSummary {
        name: variant.name.clone(),
        loss: config.loss,
        tail_ratio: config.tail_ratio,
        status,
        error: error.clone(),
        iterations_completed: last.map_or(0, |r| r.iteration),
        margin,
        train_identities: train_ids,
        train_samples,
        final_metrics: last,
        wall_time_secs: wall,
    };
    write_summary_json(&summary, create(&dir.join(SUMMARY_FILE))?)?;
    if let Some(e) = &error {
        log::error!("variant {} aborted, partial metrics kept in {}: {e}", variant.name, dir.display());
    } else {
        log::info!("variant {} done in {wall:.1}s", variant.name);
    }
    Ok(VariantOutcome {
        row: ComparisonRow {
            variant: variant.name.clone(),
            loss: config.loss,
            tail_ratio: config.tail_ratio,
            status,
            iterations_completed: summary.iterations_completed,
            margin,
            verification_accuracy: last.map(|r| r.verification_accuracy),
            mean_intra_range: last.map(|r| r.mean_intra_range),
            min_center_sq: last.map(|r| r.min_center_sq),
            softmax_loss: last.map(|r| r.softmax_loss),
            total_loss: last.map(|r| r.total_loss),
        },
        error,
    })
}

/// Trains all variants (in parallel on the current rayon pool) and writes
/// `comparison.csv` in manifest order.
pub fn run_variants(root: &Path, variants: &[Variant]) -> anyhow::Result<Vec<VariantOutcome>> {
    let outcomes: Vec<VariantOutcome> = variants
        .par_iter()
        .map(|v| run_variant(root, v))
        .collect::<anyhow::Result<_>>()?;
    let mut w = csv::Writer::from_writer(create(&root.join(COMPARISON_FILE))?);
    for o in &outcomes {
        w.serialize(&o.row)?;
    }
    w.flush()?;
    Ok(outcomes)
}

pub fn write_tail_report(root: &Path, outcomes: &[VariantOutcome]) -> anyhow::Result<()> {
    let mut rows: Vec<TailRow> = outcomes
        .iter()
        .map(|o| TailRow {
            loss: o.row.loss,
            tail_ratio: o.row.tail_ratio,
            variant: o.row.variant.clone(),
            status: o.row.status,
            verification_accuracy: o.row.verification_accuracy,
            mean_intra_range: o.row.mean_intra_range,
            min_center_sq: o.row.min_center_sq,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.loss
            .cmp(&b.loss)
            .then(a.tail_ratio.total_cmp(&b.tail_ratio))
            .then_with(|| a.variant.cmp(&b.variant))
    });
    let mut w = csv::Writer::from_writer(create(&root.join(TAIL_REPORT_FILE))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
