//! Experiment grid: pretraining, ablations, sweeps and the detector audit.

use serde::Serialize;

use super::config::{AdaptConfig, LabConfig, LossMask, Method, PretrainConfig};
use super::episode::{run_episode, with_mask, AdaptReport};
use crate::detectors::{best_threshold, detector_accuracy, partition, partition_with_truth, score, PartitionerSpec, ScoreKind};
use crate::error::{LabError, Result};
use crate::metrics::{EpisodeRecord, MetricsReport};
use crate::model::{pretrain, StatMode, TinyModel, TrainingLog};
use crate::stream::{CorruptionKind, CorruptionSpec, Stream, StreamConfig};

/// Fresh model trained on the clean stream. Initialization is keyed by the stream seed.
pub fn pretrain_model(stream_cfg: &StreamConfig, cfg: &PretrainConfig) -> Result<(TinyModel, TrainingLog)> {
    cfg.validate()?;
    let stream = Stream::new(stream_cfg.clone())?;
    let mut model = TinyModel::new(stream_cfg.d_in, cfg.d_feat, stream_cfg.num_classes, stream_cfg.seed);
    let clean = stream.clean_training_set(cfg.n_per_class);
    let log = pretrain(&mut model, &clean, cfg.epochs, cfg.lr)?;
    Ok((model, log))
}

/// Source-model metrics on uncorrupted batches.
pub fn clean_evaluation(stream_cfg: &StreamConfig, model: &TinyModel, batches: usize, eval_score: ScoreKind) -> Result<MetricsReport> {
    let stream = Stream::new(stream_cfg.clone())?;
    let spec = CorruptionSpec::new(stream_cfg.corruption.kind, 0)?;
    let mut record = EpisodeRecord::new();
    let cfg = AdaptConfig {
        eval_score,
        ..AdaptConfig::with_method(Method::Source)
    };
    for t in 0..batches {
        let batch = stream.sample_batch_with(t as u64, &spec)?;
        let out = model.infer(&batch.inputs, StatMode::Running)?;
        super::episode::record_batch(&mut record, &out, &batch, &cfg)?;
    }
    MetricsReport::evaluate(&record, None)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mask: LossMask,
    pub report: AdaptReport,
}

/// One episode per loss-term mask: none, csID, csID+ang, csID+ang+norm.
pub fn run_ablation(cfg: &LabConfig, model: &TinyModel) -> Result<Vec<AblationRow>> {
    LossMask::ABLATION
        .iter()
        .map(|&mask| {
            let adapt = with_mask(&cfg.adapt, mask);
            Ok(AblationRow {
                mask,
                report: run_episode(&cfg.stream, &adapt, &cfg.episode, model)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
    #[serde(skip)]
    pub report: AdaptReport,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Row-major over `gamma1`, then `gamma2`, at `tau = 1`.
    pub gamma_grid: Vec<SweepCell>,
    /// One cell per `tau`, other weights as configured.
    pub tau_line: Vec<SweepCell>,
}

fn rosetta_cell(cfg: &LabConfig, model: &TinyModel, gamma1: f64, gamma2: f64, tau: f64) -> Result<SweepCell> {
    let mut adapt = cfg.adapt.clone();
    adapt.method = Method::Rosetta;
    adapt.mask_override = None;
    adapt.loss.gamma1 = gamma1;
    adapt.loss.gamma2 = gamma2;
    adapt.loss.tau = tau;
    adapt.validate()?;
    let mut report = run_episode(&cfg.stream, &adapt, &cfg.episode, model)?;
    report.run = format!("rosetta g1={gamma1} g2={gamma2} tau={tau}");
    for b in &mut report.batches {
        b.run.clone_from(&report.run);
    }
    Ok(SweepCell {
        gamma1,
        gamma2,
        tau,
        report,
    })
}

/// OSCR grid over (`gamma1`, `gamma2`) and the (Acc, AUROC) line over `tau`.
pub fn run_sweep(cfg: &LabConfig, model: &TinyModel) -> Result<SweepResult> {
    cfg.sweep.validate()?;
    let mut gamma_grid = Vec::new();
    for &g1 in &cfg.sweep.gamma1 {
        for &g2 in &cfg.sweep.gamma2 {
            gamma_grid.push(rosetta_cell(cfg, model, g1, g2, 1.0)?);
        }
    }
    let tau_line = cfg
        .sweep
        .tau
        .iter()
        .map(|&tau| rosetta_cell(cfg, model, cfg.adapt.loss.gamma1, cfg.adapt.loss.gamma2, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { gamma_grid, tau_line })
}

/// The detectors compared by the audit, in table order.
pub fn audit_detectors() -> [PartitionerSpec; 5] {
    [
        PartitionerSpec::GmmEnergy {},
        PartitionerSpec::KmeansEntropy {},
        PartitionerSpec::KmeansEnergy {},
        PartitionerSpec::OracleBestThreshold {
            score_kind: ScoreKind::Entropy,
        },
        PartitionerSpec::OracleBestThreshold {
            score_kind: ScoreKind::Energy,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditBatch {
    pub corruption: CorruptionKind,
    pub batch: usize,
    /// Aligned with [`audit_detectors`].
    pub detector_acc: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DetectorAudit {
    pub detectors: Vec<PartitionerSpec>,
    pub corruptions: Vec<CorruptionKind>,
    /// `accuracy[d][c]`: mean over batches of detector `d` on corruption `c`.
    pub accuracy: Vec<Vec<f64>>,
    /// Source-model metrics per corruption.
    pub source: Vec<MetricsReport>,
    pub batches: Vec<AuditBatch>,
}

impl DetectorAudit {
    pub fn mean_accuracy(&self, d: usize) -> f64 {
        let row = &self.accuracy[d];
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// Detector accuracy on source-model outputs, per corruption.
pub fn run_detector_audit(cfg: &LabConfig, model: &TinyModel) -> Result<DetectorAudit> {
    cfg.validate()?;
    let stream = Stream::new(cfg.stream.clone())?;
    let detectors = audit_detectors().to_vec();
    let source = AdaptConfig {
        method: Method::Source,
        ..cfg.adapt.clone()
    };
    let mut accuracy = vec![Vec::new(); detectors.len()];
    let mut reports = Vec::new();
    let mut batches = Vec::new();
    for &kind in &cfg.episode.corruptions {
        let spec = CorruptionSpec::new(kind, cfg.stream.corruption.severity)?;
        let mut sums = vec![0.0; detectors.len()];
        let mut record = EpisodeRecord::new();
        for t in 0..cfg.adapt.batches_per_corruption {
            let batch = stream.sample_batch_with(t as u64, &spec)?;
            if !batch.domain.contains(&crate::stream::Domain::Ood) {
                return Err(LabError::Config("the detector audit needs csOOD samples".into()));
            }
            let out = model.infer(&batch.inputs, StatMode::Running)?;
            super::episode::record_batch(&mut record, &out, &batch, &source)?;
            let mut accs = Vec::with_capacity(detectors.len());
            for (d, spec) in detectors.iter().enumerate() {
                let p = partition_with_truth(&out, spec, &batch.domain)?;
                let a = detector_accuracy(&p, &batch.domain)?;
                sums[d] += a;
                accs.push(a);
            }
            batches.push(AuditBatch {
                corruption: kind,
                batch: t,
                detector_acc: accs,
            });
        }
        let n = cfg.adapt.batches_per_corruption as f64;
        for (d, s) in sums.into_iter().enumerate() {
            accuracy[d].push(s / n);
        }
        reports.push(MetricsReport::evaluate(&record, None)?);
    }
    Ok(DetectorAudit {
        detectors,
        corruptions: cfg.episode.corruptions.clone(),
        accuracy,
        source: reports,
        batches,
    })
}

/// Accuracy of a non-oracle detector and the oracle-best accuracy for the
/// same score on one set of outputs; the oracle never loses.
pub fn oracle_gap(
    out: &crate::model::ForwardOutput,
    spec: &PartitionerSpec,
    kind: ScoreKind,
    truth: &[crate::stream::Domain],
) -> Result<(f64, f64)> {
    let p = partition(out, spec)?;
    let fixed = detector_accuracy(&p, truth)?;
    let (_, best) = best_threshold(&score(out, kind), truth)?;
    Ok((fixed, best))
}
