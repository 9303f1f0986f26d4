//! Online adaptation over a corrupted stream.

use ndarray::{Array2, Axis};
use serde::Serialize;

use super::config::{AdaptConfig, EpisodeConfig, LossMask, Method};
use super::optim::Optimizer;
use crate::detectors::{detector_accuracy, partition, score};
use crate::error::{LabError, Result};
use crate::losses::{grad_bn_from_output, rosetta_loss_weighted, LossComponents, PartitionedBatch, PrototypeBank};
use crate::mathcore::{l1_norm, l2_norm};
use crate::metrics::{EpisodeRecord, MetricsReport, SampleRecord};
use crate::model::{ForwardOutput, StatMode, TinyModel};
use crate::stream::{CorruptionKind, CorruptionSpec, Domain, LabeledBatch, Stream, StreamConfig};

/// Points on each mean sorted-logit curve.
pub const CURVE_POINTS: usize = 16;

/// Model, prototypes and optimizer state of one adaptation run.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub model: TinyModel,
    pub bank: PrototypeBank,
    optimizer: Optimizer,
    cfg: AdaptConfig,
}

/// What one step saw and did. Holds no ground truth.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Forward pass before the parameter update; used for evaluation.
    pub output: ForwardOutput,
    pub partition: PartitionedBatch,
    pub loss: LossComponents,
}

impl Adapter {
    pub fn new(model: TinyModel, cfg: &AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let n = model.trainable_parameters().len();
        Ok(Self {
            bank: PrototypeBank::from_classifier(&model.w_l),
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr, n),
            model,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    /// One online step on unlabeled inputs: forward, partition, masked loss,
    /// optimizer step on the BatchNorm affine parameters, prototype update.
    pub fn step(&mut self, inputs: &Array2<f64>) -> Result<StepOutput> {
        let mask = self.cfg.mask();
        let mode = if self.cfg.method == Method::Source {
            StatMode::Running
        } else {
            StatMode::Batch
        };
        let output = self.model.forward(inputs, mode)?;
        let partition = match partition(&output, &self.cfg.partitioner) {
            Err(LabError::Degenerate(msg)) => {
                log::warn!("detector cannot split the batch ({msg}); routing every sample to csID");
                PartitionedBatch::from_flags(&vec![false; output.len()], &output.predictions())?
            }
            other => other?,
        };
        let weights = mask.weights(&self.cfg.loss);
        let beta1 = self.cfg.loss.beta1;

        let loss = if mask.is_empty() || mode == StatMode::Running {
            rosetta_loss_weighted(&partition, &output, &self.bank, beta1, weights)?
        } else {
            let g = grad_bn_from_output(&self.model, &output, &partition, &self.bank, beta1, weights)?;
            let mut params = self.model.trainable_parameters();
            self.optimizer.step(&mut params, &g.total.flatten())?;
            self.model.set_trainable_parameters(&params)?;
            g.components
        };
        if !loss.total.is_finite() {
            return Err(LabError::Numeric {
                component: "L_ROSETTA".into(),
                detail: format!("loss is {}", loss.total),
            });
        }

        if mask.ang && !partition.csid_indices.is_empty() {
            let feats = output.features.select(Axis(0), &partition.csid_indices);
            self.bank.update(feats.view(), &partition.pseudo_labels, self.cfg.loss.alpha)?;
        }
        Ok(StepOutput {
            output,
            partition,
            loss,
        })
    }
}

/// Free-function form of [`Adapter::step`].
pub fn adapt_step(adapter: &mut Adapter, inputs: &Array2<f64>) -> Result<StepOutput> {
    adapter.step(inputs)
}

/// Per-batch record written to `diagnostics.jsonl`. Domain-wise fields are
/// `None` when the batch holds no sample of that domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchDiagnostics {
    pub run: String,
    pub corruption: CorruptionKind,
    pub batch: usize,
    pub loss: LossComponents,
    pub feature_l2_csid: Option<f64>,
    pub feature_l2_csood: Option<f64>,
    pub logit_l1_csid: Option<f64>,
    pub logit_l1_csood: Option<f64>,
    pub sorted_logits_csid: Option<Vec<f64>>,
    pub sorted_logits_csood: Option<Vec<f64>>,
    pub detector_acc: f64,
    pub flagged_csood: usize,
}

fn domain_rows(batch: &LabeledBatch, d: Domain) -> Vec<usize> {
    (0..batch.len()).filter(|&i| batch.domain[i] == d).collect()
}

fn mean_row_norm(m: &Array2<f64>, rows: &[usize], norm: fn(&[f64]) -> f64) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|&i| norm(&m.row(i).to_vec())).sum::<f64>() / rows.len() as f64)
}

/// Mean of the descending-sorted logit vectors, resampled to [`CURVE_POINTS`]
/// points by linear interpolation over rank.
pub fn sorted_logit_curve(logits: &Array2<f64>, rows: &[usize]) -> Option<Vec<f64>> {
    if rows.is_empty() {
        return None;
    }
    let k = logits.ncols();
    let mut mean = vec![0.0; k];
    for &i in rows {
        let mut v = logits.row(i).to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    if k == 1 {
        return Some(vec![mean[0]; CURVE_POINTS]);
    }
    Some(
        (0..CURVE_POINTS)
            .map(|j| {
                let pos = j as f64 * (k - 1) as f64 / (CURVE_POINTS - 1) as f64;
                let lo = (pos.floor() as usize).min(k - 2);
                let frac = pos - lo as f64;
                mean[lo] + frac * (mean[lo + 1] - mean[lo])
            })
            .collect(),
    )
}

/// Diagnostics for one step, joining the step output with the batch truth.
pub fn diagnose(run: &str, corruption: CorruptionKind, t: usize, step: &StepOutput, batch: &LabeledBatch) -> Result<BatchDiagnostics> {
    let out = &step.output;
    let id = domain_rows(batch, Domain::Id);
    let ood = domain_rows(batch, Domain::Ood);
    Ok(BatchDiagnostics {
        run: run.to_string(),
        corruption,
        batch: t,
        loss: step.loss,
        feature_l2_csid: mean_row_norm(&out.features, &id, l2_norm),
        feature_l2_csood: mean_row_norm(&out.features, &ood, l2_norm),
        logit_l1_csid: mean_row_norm(&out.logits, &id, l1_norm),
        logit_l1_csood: mean_row_norm(&out.logits, &ood, l1_norm),
        sorted_logits_csid: sorted_logit_curve(&out.logits, &id),
        sorted_logits_csood: sorted_logit_curve(&out.logits, &ood),
        detector_acc: detector_accuracy(&step.partition, &batch.domain)?,
        flagged_csood: step.partition.csood_indices.len(),
    })
}

/// Appends one batch of evaluation samples to `record`.
pub fn record_batch(record: &mut EpisodeRecord, out: &ForwardOutput, batch: &LabeledBatch, cfg: &AdaptConfig) -> Result<()> {
    let scores = score(out, cfg.eval_score);
    let preds = out.predictions();
    for i in 0..batch.len() {
        record.push(SampleRecord {
            ood_score: scores[i],
            domain: batch.domain[i],
            true_class: batch.true_class[i],
            predicted_class: preds[i],
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CorruptionResult {
    pub corruption: CorruptionKind,
    pub report: MetricsReport,
    pub record: EpisodeRecord,
}

#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub run: String,
    /// One entry per processed batch, in stream order.
    pub batches: Vec<BatchDiagnostics>,
    pub per_corruption: Vec<CorruptionResult>,
    pub mean: MetricsReport,
}

impl AdaptReport {
    pub fn batches_for(&self, c: CorruptionKind) -> impl Iterator<Item = &BatchDiagnostics> {
        self.batches.iter().filter(move |b| b.corruption == c)
    }
}

fn attribute(e: LabError, c: CorruptionKind, t: usize) -> LabError {
    LabError::Episode {
        corruption: c.to_string(),
        batch: t,
        source: Box::new(e),
    }
}

/// Streams `batches_per_corruption` batches per corruption at the configured
/// severity, resetting to `model` between corruptions unless continual.
pub fn run_episode(
    stream_cfg: &StreamConfig,
    adapt_cfg: &AdaptConfig,
    episode: &EpisodeConfig,
    model: &TinyModel,
) -> Result<AdaptReport> {
    episode.validate()?;
    let stream = Stream::new(stream_cfg.clone())?;
    let run = adapt_cfg.label();
    let severity = stream_cfg.corruption.severity;
    let mut adapter = Adapter::new(model.clone(), adapt_cfg)?;
    let mut batches = Vec::new();
    let mut per_corruption = Vec::new();
    for (ci, &kind) in episode.corruptions.iter().enumerate() {
        if ci > 0 && !episode.continual {
            adapter = Adapter::new(model.clone(), adapt_cfg)?;
        }
        let spec = CorruptionSpec::new(kind, severity)?;
        let mut record = EpisodeRecord::new();
        let mut det = Vec::with_capacity(adapt_cfg.batches_per_corruption);
        for t in 0..adapt_cfg.batches_per_corruption {
            let batch = stream.sample_batch_with(t as u64, &spec)?;
            let step = adapter.step(&batch.inputs).map_err(|e| attribute(e, kind, t))?;
            record_batch(&mut record, &step.output, &batch, adapt_cfg)?;
            let d = diagnose(&run, kind, t, &step, &batch)?;
            det.push(d.detector_acc);
            batches.push(d);
        }
        let detector_acc = det.iter().sum::<f64>() / det.len() as f64;
        let report = MetricsReport::evaluate(&record, Some(detector_acc))?;
        log::info!("{run} {kind}: acc {:.4} auroc {:?}", report.acc, report.auroc);
        per_corruption.push(CorruptionResult {
            corruption: kind,
            report,
            record,
        });
    }
    let reports: Vec<MetricsReport> = per_corruption.iter().map(|c| c.report).collect();
    Ok(AdaptReport {
        run,
        batches,
        per_corruption,
        mean: MetricsReport::macro_mean(&reports)?,
    })
}

/// Mean over corruptions of `(csID − csOOD)` mean logit ℓ1 norm over the last
/// `window` batches of each corruption.
pub fn logit_l1_gap(report: &AdaptReport, window: usize) -> Option<f64> {
    let mut gaps = Vec::new();
    for c in &report.per_corruption {
        let rows: Vec<&BatchDiagnostics> = report.batches_for(c.corruption).collect();
        let tail = &rows[rows.len().saturating_sub(window)..];
        let mut id = Vec::new();
        let mut ood = Vec::new();
        for b in tail {
            id.extend(b.logit_l1_csid);
            ood.extend(b.logit_l1_csood);
        }
        if id.is_empty() || ood.is_empty() {
            return None;
        }
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        gaps.push(m(&id) - m(&ood));
    }
    if gaps.is_empty() {
        None
    } else {
        Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

/// Masks grouped for convenience when building ablation configs.
pub fn with_mask(cfg: &AdaptConfig, mask: LossMask) -> AdaptConfig {
    let mut c = cfg.clone();
    c.method = if mask.is_empty() { Method::BnAdapt } else { Method::Rosetta };
    c.mask_override = Some(mask);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn curve_interpolates_ranks() {
        let logits = array![[1.0, 4.0, 2.0, 3.0], [0.0, 0.0, 0.0, 8.0]];
        let c = sorted_logit_curve(&logits, &[0, 1]).unwrap();
        assert_eq!(c.len(), CURVE_POINTS);
        // mean sorted: [6, 1.5, 1, 0.5]
        assert_eq!(c[0], 6.0);
        assert_eq!(c[5], 1.5);
        assert_eq!(c[10], 1.0);
        assert_eq!(c[15], 0.5);
        assert!((c[1] - (6.0 - 4.5 / 5.0)).abs() < 1e-12);
        assert!(sorted_logit_curve(&logits, &[]).is_none());
    }
}
