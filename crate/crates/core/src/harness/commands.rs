//! File-producing entry points behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::LabConfig;
use super::episode::{run_episode, AdaptReport};
use super::experiments::{clean_evaluation, pretrain_model, run_ablation, run_detector_audit, run_sweep};
use super::output::{write_jsonl_file, write_metrics_file, write_table_file};
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::model::TinyModel;

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const DETECTORS_FILE: &str = "detectors.csv";

/// Batches used for the clean evaluation written by `pretrain`.
const CLEAN_EVAL_BATCHES: usize = 10;

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: LabConfig,
    pub out: PathBuf,
    /// Pretrained model to start from; pretrain in-process when absent.
    pub checkpoint: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(config: LabConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            checkpoint: None,
        }
    }

    fn model(&self) -> Result<TinyModel> {
        match &self.checkpoint {
            Some(p) => TinyModel::load_file(p),
            None => Ok(pretrain_model(&self.config.stream, &self.config.pretrain)?.0),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare(&self) -> Result<()> {
        self.config.validate()?;
        fs::create_dir_all(&self.out)?;
        Ok(())
    }
}

fn episode_rows(report: &AdaptReport) -> Vec<(Vec<String>, &MetricsReport)> {
    report
        .per_corruption
        .iter()
        .map(|c| (vec![c.corruption.to_string()], &c.report))
        .chain(std::iter::once((vec!["mean".to_string()], &report.mean)))
        .collect()
}

fn prefixed<'a>(prefix: &[String], rows: Vec<(Vec<String>, &'a MetricsReport)>) -> Vec<(Vec<String>, &'a MetricsReport)> {
    rows.into_iter()
        .map(|(k, r)| (prefix.iter().cloned().chain(k).collect(), r))
        .collect()
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    loss: f64,
    accuracy: f64,
}

/// Trains on the clean stream and writes `model.ckpt`, a clean-evaluation
/// `metrics.csv` and one `diagnostics.jsonl` record per epoch.
pub fn pretrain_command(opts: &RunOptions) -> Result<TinyModel> {
    opts.prepare()?;
    let cfg = &opts.config;
    let (model, log) = pretrain_model(&cfg.stream, &cfg.pretrain)?;
    log::info!("pretrained: clean accuracy {:.4}", log.final_accuracy);
    model.save_file(&opts.path(CHECKPOINT_FILE))?;
    let clean = clean_evaluation(&cfg.stream, &model, CLEAN_EVAL_BATCHES, cfg.adapt.eval_score)?;
    write_metrics_file(&opts.path(METRICS_FILE), &["split"], &[(vec!["clean".into()], &clean)])?;
    write_jsonl_file(
        &opts.path(DIAGNOSTICS_FILE),
        log.epochs.iter().map(|e| EpochRecord {
            epoch: e.epoch,
            loss: e.loss,
            accuracy: e.accuracy,
        }),
    )?;
    Ok(model)
}

pub fn adapt_command(opts: &RunOptions) -> Result<AdaptReport> {
    opts.prepare()?;
    let cfg = &opts.config;
    let report = run_episode(&cfg.stream, &cfg.adapt, &cfg.episode, &opts.model()?)?;
    write_metrics_file(&opts.path(METRICS_FILE), &["corruption"], &episode_rows(&report))?;
    write_jsonl_file(&opts.path(DIAGNOSTICS_FILE), &report.batches)?;
    Ok(report)
}

pub fn ablate_command(opts: &RunOptions) -> Result<()> {
    opts.prepare()?;
    let rows = run_ablation(&opts.config, &opts.model()?)?;
    let mut table = Vec::new();
    for r in &rows {
        table.extend(prefixed(&[r.mask.label()], episode_rows(&r.report)));
    }
    write_metrics_file(&opts.path(METRICS_FILE), &["mask", "corruption"], &table)?;
    write_jsonl_file(&opts.path(DIAGNOSTICS_FILE), rows.iter().flat_map(|r| &r.report.batches))?;
    Ok(())
}

pub fn sweep_command(opts: &RunOptions) -> Result<()> {
    opts.prepare()?;
    let res = run_sweep(&opts.config, &opts.model()?)?;
    let cells = res
        .gamma_grid
        .iter()
        .map(|c| ("gamma", c))
        .chain(res.tau_line.iter().map(|c| ("tau", c)));
    let mut table = Vec::new();
    for (kind, c) in cells.clone() {
        let key = vec![kind.to_string(), c.gamma1.to_string(), c.gamma2.to_string(), c.tau.to_string()];
        table.push((key, &c.report.mean));
    }
    write_metrics_file(&opts.path(METRICS_FILE), &["sweep", "gamma1", "gamma2", "tau"], &table)?;
    write_jsonl_file(&opts.path(DIAGNOSTICS_FILE), cells.flat_map(|(_, c)| &c.report.batches))?;
    Ok(())
}

pub fn audit_command(opts: &RunOptions) -> Result<()> {
    opts.prepare()?;
    let audit = run_detector_audit(&opts.config, &opts.model()?)?;
    let mut header = vec!["detector".to_string()];
    header.extend(audit.corruptions.iter().map(|c| c.to_string()));
    header.push("mean".into());
    let pivot: Vec<Vec<String>> = audit
        .detectors
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            let mut row = vec![spec.label()];
            row.extend(audit.accuracy[d].iter().map(|a| format!("{:.2}", 100.0 * a)));
            row.push(format!("{:.2}", 100.0 * audit.mean_accuracy(d)));
            row
        })
        .collect();
    write_table_file(&opts.path(DETECTORS_FILE), &header, &pivot)?;

    let mut reports = Vec::new();
    for (d, spec) in audit.detectors.iter().enumerate() {
        for (c, kind) in audit.corruptions.iter().enumerate() {
            let mut r = audit.source[c];
            r.detector_acc = Some(audit.accuracy[d][c]);
            reports.push((vec![spec.label(), kind.to_string()], r));
        }
        let mut mean = MetricsReport::macro_mean(&audit.source)?;
        mean.detector_acc = Some(audit.mean_accuracy(d));
        reports.push((vec![spec.label(), "mean".into()], mean));
    }
    let table: Vec<(Vec<String>, &MetricsReport)> = reports.iter().map(|(k, r)| (k.clone(), r)).collect();
    write_metrics_file(&opts.path(METRICS_FILE), &["detector", "corruption"], &table)?;
    write_jsonl_file(&opts.path(DIAGNOSTICS_FILE), &audit.batches)?;
    Ok(())
}

/// Reads a config file, or defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<LabConfig> {
    match path {
        Some(p) => LabConfig::from_file(p),
        None => Ok(LabConfig::default()),
    }
}
