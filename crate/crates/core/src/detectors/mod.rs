//! OOD scores and the batch partitioners that split a test batch into
//! presumed csID and csOOD samples.
//!
//! Every score is oriented so that larger means more OOD.

mod gmm;
mod kmeans;

pub use gmm::{fit_gmm2, Gmm2, GmmFit};
pub use kmeans::{kmeans2, KMeans2};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::losses::PartitionedBatch;
use crate::mathcore::{entropy_raw, l1_norm, l2_norm, log_sum_exp_unchecked, softmax_in_place};
use crate::model::ForwardOutput;
use crate::stream::Domain;

/// Added to the ℓ2 norm in the NAN ratio so all-zero features stay finite.
pub const NAN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Entropy,
    Energy,
    L1norm,
    Nan,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Entropy => "entropy",
            ScoreKind::Energy => "energy",
            ScoreKind::L1norm => "l1norm",
            ScoreKind::Nan => "nan",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One OOD score per sample.
pub fn score(out: &ForwardOutput, kind: ScoreKind) -> Vec<f64> {
    match kind {
        ScoreKind::Entropy => out
            .logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut p = r.to_vec();
                softmax_in_place(&mut p);
                entropy_raw(&p)
            })
            .collect(),
        ScoreKind::Energy => out
            .logits
            .rows()
            .into_iter()
            .map(|r| -log_sum_exp_unchecked(r.as_slice().unwrap()))
            .collect(),
        ScoreKind::L1norm => out
            .features
            .rows()
            .into_iter()
            .map(|r| -l1_norm(r.as_slice().unwrap()))
            .collect(),
        ScoreKind::Nan => out
            .features
            .rows()
            .into_iter()
            .map(|r| {
                let a = r.as_slice().unwrap();
                -l1_norm(a) / (l2_norm(a) + NAN_EPS)
            })
            .collect(),
    }
}

/// How a batch is split into presumed csID / csOOD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionerSpec {
    GmmEnergy {},
    KmeansEntropy {},
    KmeansEnergy {},
    FixedThreshold { score_kind: ScoreKind, threshold: f64 },
    /// Evaluation-only: picks the accuracy-maximizing threshold using ground truth.
    OracleBestThreshold { score_kind: ScoreKind },
}

impl PartitionerSpec {
    pub fn is_oracle(&self) -> bool {
        matches!(self, PartitionerSpec::OracleBestThreshold { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let PartitionerSpec::FixedThreshold { threshold, .. } = self {
            if threshold.is_nan() {
                return Err(contract("threshold must not be NaN"));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            PartitionerSpec::GmmEnergy {} => "gmm_energy".into(),
            PartitionerSpec::KmeansEntropy {} => "kmeans_entropy".into(),
            PartitionerSpec::KmeansEnergy {} => "kmeans_energy".into(),
            PartitionerSpec::FixedThreshold {
                score_kind,
                threshold,
            } => format!("fixed_{score_kind}_{threshold}"),
            PartitionerSpec::OracleBestThreshold { score_kind } => format!("oracle_best_{score_kind}"),
        }
    }
}

impl Default for PartitionerSpec {
    fn default() -> Self {
        PartitionerSpec::GmmEnergy {}
    }
}

fn threshold_flags(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

/// Per-sample OOD flags from a non-oracle partitioner.
pub fn ood_flags(out: &ForwardOutput, spec: &PartitionerSpec) -> Result<Vec<bool>> {
    spec.validate()?;
    Ok(match *spec {
        PartitionerSpec::GmmEnergy {} => {
            let s = score(out, ScoreKind::Energy);
            let g = fit_gmm2(&s)?.model;
            let up = g.upper();
            s.iter().map(|&x| g.responsibilities(x)[up] > 0.5).collect()
        }
        PartitionerSpec::KmeansEntropy {} | PartitionerSpec::KmeansEnergy {} => {
            let kind = if matches!(spec, PartitionerSpec::KmeansEntropy {}) {
                ScoreKind::Entropy
            } else {
                ScoreKind::Energy
            };
            kmeans2(&score(out, kind))?
                .assignment
                .into_iter()
                .map(|a| a == 1)
                .collect()
        }
        PartitionerSpec::FixedThreshold {
            score_kind,
            threshold,
        } => threshold_flags(&score(out, score_kind), threshold),
        PartitionerSpec::OracleBestThreshold { .. } => {
            return Err(contract(
                "oracle partitioners need ground truth; use partition_with_truth",
            ))
        }
    })
}

/// Splits a batch; csID samples get argmax pseudo-labels.
pub fn partition(out: &ForwardOutput, spec: &PartitionerSpec) -> Result<PartitionedBatch> {
    PartitionedBatch::from_flags(&ood_flags(out, spec)?, &out.predictions())
}

/// Like [`partition`], but also serves oracle specs. Evaluation only.
pub fn partition_with_truth(
    out: &ForwardOutput,
    spec: &PartitionerSpec,
    truth: &[Domain],
) -> Result<PartitionedBatch> {
    match *spec {
        PartitionerSpec::OracleBestThreshold { score_kind } => {
            let s = score(out, score_kind);
            let (t, _) = best_threshold(&s, truth)?;
            PartitionedBatch::from_flags(&threshold_flags(&s, t), &out.predictions())
        }
        _ => partition(out, spec),
    }
}

/// Exhaustive threshold search maximizing csID/csOOD accuracy, with `score > t`
/// meaning csOOD. Candidates are `-∞`, midpoints of consecutive distinct scores,
/// and `+∞`; the lowest maximizer wins.
pub fn best_threshold(scores: &[f64], truth: &[Domain]) -> Result<(f64, f64)> {
    if scores.len() != truth.len() {
        return Err(contract("scores and domain flags differ in length"));
    }
    let n_ood = truth.iter().filter(|&&d| d == Domain::Ood).count();
    if n_ood == 0 || n_ood == truth.len() {
        return Err(contract("best_threshold needs both domains present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len() as f64;
    // Threshold -∞: everything flagged OOD.
    let mut correct = n_ood as i64;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            correct += if truth[order[i]] == Domain::Id { 1 } else { -1 };
            i += 1;
        }
        let t = if i < order.len() {
            0.5 * (v + scores[order[i]])
        } else {
            f64::INFINITY
        };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    Ok((best.0, best.1 as f64 / n))
}

/// Fraction of samples whose routed domain matches the truth.
pub fn detector_accuracy(partition: &PartitionedBatch, truth: &[Domain]) -> Result<f64> {
    if partition.len() != truth.len() {
        return Err(contract(format!(
            "partition has {} samples, truth has {}",
            partition.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(contract("detector accuracy of an empty batch"));
    }
    let flags = partition.ood_flags();
    let hits = flags
        .iter()
        .zip(truth)
        .filter(|(&ood, &d)| ood == (d == Domain::Ood))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}
