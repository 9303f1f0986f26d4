//! Analytic gradients of the loss family with respect to `gamma` and `beta`.
//!
//! The partition and the prototype bank are constants inside one step.

use ndarray::{Array2, Array1};

use super::{angular_members, rosetta_loss_weighted, LossComponents, LossConfig, LossWeights, PartitionedBatch, PrototypeBank};
use crate::error::{contract, LabError, Result};
use crate::mathcore::l2_norm;
use crate::model::{BnGrad, ForwardOutput, StatMode, TinyModel};

/// Per-term gradients (unweighted) and the weighted total.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub csid: BnGrad,
    pub ang: BnGrad,
    pub norm: BnGrad,
    pub total: BnGrad,
    pub components: LossComponents,
}

/// Runs a batch-mode forward pass on `batch` and differentiates the total loss.
pub fn grad_bn(
    model: &TinyModel,
    batch: &Array2<f64>,
    partition: &PartitionedBatch,
    bank: &PrototypeBank,
    cfg: &LossConfig,
) -> Result<LossGradient> {
    let out = model.infer(batch, StatMode::Batch)?;
    grad_bn_from_output(model, &out, partition, bank, cfg.beta1, cfg.weights())
}

pub fn grad_bn_from_output(
    model: &TinyModel,
    out: &ForwardOutput,
    partition: &PartitionedBatch,
    bank: &PrototypeBank,
    beta1: f64,
    weights: LossWeights,
) -> Result<LossGradient> {
    if out.mode != StatMode::Batch {
        return Err(contract("gradients are defined for batch-statistics forward passes"));
    }
    let components = rosetta_loss_weighted(partition, out, bank, beta1, weights)?;

    let d_logits = csid_logit_grad(out, partition, beta1);
    let csid = finite(model.backward_affine(out, &d_logits.dot(&model.w_l.t())), "L_csID")?;
    let ang = finite(model.backward_affine(out, &angular_feature_grad(out, partition, bank)), "L_ang")?;
    let norm = finite(model.backward_affine(out, &norm_feature_grad(out, partition)), "L_norm")?;

    let mut total = BnGrad::zeros(model.d_feat());
    total.scaled_add(weights.csid, &csid);
    if weights.ang != 0.0 {
        total.scaled_add(weights.ang, &ang);
    }
    if weights.norm != 0.0 {
        total.scaled_add(weights.norm, &norm);
    }
    let total = finite(total, "L_ROSETTA")?;
    Ok(LossGradient {
        csid,
        ang,
        norm,
        total,
        components,
    })
}

fn finite(g: BnGrad, component: &str) -> Result<BnGrad> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(LabError::Numeric {
            component: component.to_string(),
            detail: "non-finite gradient".into(),
        })
    }
}

/// `dL_csID / dlogits`.
fn csid_logit_grad(out: &ForwardOutput, partition: &PartitionedBatch, beta1: f64) -> Array2<f64> {
    let probs = out.probabilities();
    let (b, k) = probs.dim();
    let mut d = Array2::zeros((b, k));

    // dH(p)/dψ_k = -p_k (log p_k + H(p))
    if !partition.csid_indices.is_empty() {
        let scale = 1.0 / partition.csid_indices.len() as f64;
        for &i in &partition.csid_indices {
            let p = probs.row(i);
            let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            for j in 0..k {
                let pj = p[j];
                if pj > 0.0 {
                    d[[i, j]] -= scale * pj * (pj.ln() + h);
                }
            }
        }
    }

    // dH(p̄)/dψ_il = (1/B) p_il (Σ_k p_ik log p̄_k - log p̄_l)
    if beta1 != 0.0 {
        let marginal: Array1<f64> = probs.mean_axis(ndarray::Axis(0)).unwrap();
        let log_m = marginal.mapv(|v| if v > 0.0 { v.ln() } else { 0.0 });
        let inv_b = 1.0 / b as f64;
        for i in 0..b {
            let p = probs.row(i);
            let avg = p.dot(&log_m);
            for l in 0..k {
                d[[i, l]] -= beta1 * inv_b * p[l] * (avg - log_m[l]);
            }
        }
    }
    d
}

/// `dL_ang / dfeatures`; rows outside the angular term stay zero.
fn angular_feature_grad(out: &ForwardOutput, partition: &PartitionedBatch, bank: &PrototypeBank) -> Array2<f64> {
    let mut d = Array2::zeros(out.features.dim());
    let (rows, labels) = angular_members(out, partition);
    if rows.is_empty() {
        return d;
    }
    let scale = 1.0 / rows.len() as f64;
    for (&i, &c) in rows.iter().zip(&labels) {
        let a = out.features.row(i);
        let mu = bank.prototypes.row(c);
        let na = l2_norm(a.as_slice().unwrap());
        let nm = l2_norm(&mu.to_vec());
        let cos = a.dot(&mu) / (na * nm);
        // d(1 - cos)/da = -(mu / (|mu||a|) - cos · a / |a|²)
        for j in 0..a.len() {
            d[[i, j]] = -scale * (mu[j] / (nm * na) - cos * a[j] / (na * na));
        }
    }
    d
}

/// `dL_norm / dfeatures`: `sign(a)/|O|` on csOOD rows.
fn norm_feature_grad(out: &ForwardOutput, partition: &PartitionedBatch) -> Array2<f64> {
    let mut d = Array2::zeros(out.features.dim());
    if partition.csood_indices.is_empty() {
        return d;
    }
    let scale = 1.0 / partition.csood_indices.len() as f64;
    for &i in &partition.csood_indices {
        for (g, &a) in d.row_mut(i).iter_mut().zip(out.features.row(i)) {
            *g = scale * if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 };
        }
    }
    d
}
