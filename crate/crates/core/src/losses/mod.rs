//! Test-time objective: entropy minimization on presumed-ID samples with a
//! marginal-entropy regularizer, angular alignment to class prototypes, and
//! ℓ1 suppression of presumed-OOD features.

mod grad;
mod prototypes;

pub use grad::{grad_bn, grad_bn_from_output, LossGradient};
pub use prototypes::PrototypeBank;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{contract, degenerate, LabError, Result};
use crate::mathcore::{cosine_similarity, entropy_raw, l1_norm, l2_norm, ProbabilityVector};
use crate::model::ForwardOutput;

fn default_beta1() -> f64 {
    1.0
}
fn default_gamma1() -> f64 {
    1.0
}
fn default_gamma2() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.005
}
fn default_tau() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the marginal-entropy regularizer.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    /// Weight of the angular alignment loss.
    #[serde(default = "default_gamma1")]
    pub gamma1: f64,
    /// Weight of the csOOD feature-norm loss.
    #[serde(default = "default_gamma2")]
    pub gamma2: f64,
    /// Prototype momentum.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Common scale applied to both OOD-side terms.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            gamma1: default_gamma1(),
            gamma2: default_gamma2(),
            alpha: default_alpha(),
            tau: default_tau(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta1", self.beta1),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(LabError::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(LabError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            csid: 1.0,
            ang: self.tau * self.gamma1,
            norm: self.tau * self.gamma2,
        }
    }
}

/// Effective multipliers of the three terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub csid: f64,
    pub ang: f64,
    pub norm: f64,
}

/// Detector output for one batch. Indices refer to rows of a [`ForwardOutput`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionedBatch {
    pub csid_indices: Vec<usize>,
    /// Argmax class per csID sample, aligned with `csid_indices`.
    pub pseudo_labels: Vec<usize>,
    pub csood_indices: Vec<usize>,
}

impl PartitionedBatch {
    /// Builds a partition from per-sample OOD flags, pseudo-labelling csID rows by argmax.
    pub fn from_flags(is_ood: &[bool], predictions: &[usize]) -> Result<Self> {
        if is_ood.len() != predictions.len() {
            return Err(contract("flags and predictions differ in length"));
        }
        let mut p = PartitionedBatch {
            csid_indices: Vec::new(),
            pseudo_labels: Vec::new(),
            csood_indices: Vec::new(),
        };
        for (i, (&ood, &pred)) in is_ood.iter().zip(predictions).enumerate() {
            if ood {
                p.csood_indices.push(i);
            } else {
                p.csid_indices.push(i);
                p.pseudo_labels.push(pred);
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.csid_indices.len() + self.csood_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `true` where the sample was routed to csOOD.
    pub fn ood_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len()];
        for &i in &self.csood_indices {
            flags[i] = true;
        }
        flags
    }

    /// Checks that the indices are disjoint and cover `0..batch` exactly.
    pub fn validate(&self, batch: usize, num_classes: usize) -> Result<()> {
        if self.csid_indices.len() != self.pseudo_labels.len() {
            return Err(contract("pseudo-labels not aligned with csID indices"));
        }
        if self.len() != batch {
            return Err(contract(format!(
                "partition covers {} samples, batch has {batch}",
                self.len()
            )));
        }
        let mut seen = vec![false; batch];
        for &i in self.csid_indices.iter().chain(&self.csood_indices) {
            if i >= batch || seen[i] {
                return Err(contract(format!("partition index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if self.pseudo_labels.iter().any(|&c| c >= num_classes) {
            return Err(contract("pseudo-label outside class range"));
        }
        Ok(())
    }
}

/// Mean entropy over csID predictions minus `beta1` times the entropy of the
/// batch-mean prediction over *all* samples.
pub fn csid_loss(
    probs_csid: &[ProbabilityVector],
    probs_all: &[ProbabilityVector],
    beta1: f64,
) -> Result<f64> {
    let first = probs_all
        .first()
        .ok_or_else(|| contract("csid_loss needs at least one sample in the batch"))?;
    let k = first.len();
    if probs_all.iter().chain(probs_csid).any(|p| p.len() != k) {
        return Err(contract("probability vectors differ in length"));
    }
    let conditional = if probs_csid.is_empty() {
        0.0
    } else {
        probs_csid.iter().map(|p| entropy_raw(p)).sum::<f64>() / probs_csid.len() as f64
    };
    let mut marginal = vec![0.0; k];
    for p in probs_all {
        for (m, v) in marginal.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    let n = probs_all.len() as f64;
    marginal.iter_mut().for_each(|m| *m /= n);
    Ok(conditional - beta1 * entropy_raw(&marginal))
}

fn csid_loss_rows(probs: &Array2<f64>, csid: &[usize], beta1: f64) -> f64 {
    let conditional = if csid.is_empty() {
        0.0
    } else {
        csid.iter()
            .map(|&i| entropy_raw(probs.row(i).as_slice().unwrap()))
            .sum::<f64>()
            / csid.len() as f64
    };
    let marginal = probs.mean_axis(ndarray::Axis(0)).unwrap();
    conditional - beta1 * entropy_raw(marginal.as_slice().unwrap())
}

/// Mean of `1 - cos(prototype_c, feature)` over csID rows; 0 when there are none.
pub fn angular_loss(
    features_csid: ArrayView2<f64>,
    pseudo_labels: &[usize],
    bank: &PrototypeBank,
) -> Result<f64> {
    if features_csid.nrows() != pseudo_labels.len() {
        return Err(contract("features and pseudo-labels are not row-aligned"));
    }
    if features_csid.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &c) in features_csid.rows().into_iter().zip(pseudo_labels) {
        if c >= bank.num_classes() {
            return Err(contract(format!("pseudo-label {c} outside the prototype bank")));
        }
        if !bank.initialized[c] {
            return Err(degenerate(format!("prototype of class {c} is uninitialized")));
        }
        let a = row.to_vec();
        let p = bank.prototypes.row(c).to_vec();
        total += 1.0 - cosine_similarity(&p, &a)?;
    }
    Ok(total / features_csid.nrows() as f64)
}

/// Mean ℓ1-norm of csOOD feature rows; 0 when there are none.
pub fn norm_loss(features_csood: ArrayView2<f64>) -> f64 {
    if features_csood.nrows() == 0 {
        return 0.0;
    }
    features_csood
        .rows()
        .into_iter()
        .map(|r| l1_norm(&r.to_vec()))
        .sum::<f64>()
        / features_csood.nrows() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossComponents {
    pub csid: f64,
    pub ang: f64,
    pub norm: f64,
    pub total: f64,
}

/// csID rows that carry a direction; all-zero rectified features have no angle
/// to a prototype and are left out of the angular term.
pub(crate) fn angular_members(out: &ForwardOutput, partition: &PartitionedBatch) -> (Vec<usize>, Vec<usize>) {
    partition
        .csid_indices
        .iter()
        .zip(&partition.pseudo_labels)
        .filter(|(&i, _)| l2_norm(out.features.row(i).as_slice().unwrap()) > 0.0)
        .map(|(&i, &c)| (i, c))
        .unzip()
}

/// Total loss `L_csID + tau·gamma1·L_ang + tau·gamma2·L_norm` with its parts.
pub fn rosetta_loss(
    partition: &PartitionedBatch,
    out: &ForwardOutput,
    bank: &PrototypeBank,
    cfg: &LossConfig,
) -> Result<LossComponents> {
    rosetta_loss_weighted(partition, out, bank, cfg.beta1, cfg.weights())
}

pub fn rosetta_loss_weighted(
    partition: &PartitionedBatch,
    out: &ForwardOutput,
    bank: &PrototypeBank,
    beta1: f64,
    w: LossWeights,
) -> Result<LossComponents> {
    partition.validate(out.len(), out.logits.ncols())?;
    let probs = out.probabilities();
    let csid = csid_loss_rows(&probs, &partition.csid_indices, beta1);
    let (ang_rows, ang_labels) = angular_members(out, partition);
    let ang = angular_loss(out.features.select(ndarray::Axis(0), &ang_rows).view(), &ang_labels, bank)?;
    let norm = norm_loss(out.features.select(ndarray::Axis(0), &partition.csood_indices).view());
    let mut total = w.csid * csid;
    if w.ang != 0.0 {
        total += w.ang * ang;
    }
    if w.norm != 0.0 {
        total += w.norm * norm;
    }
    Ok(LossComponents {
        csid,
        ang,
        norm,
        total,
    })
}
