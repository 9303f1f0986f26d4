//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rosetta_lab::losses::{grad_bn_from_output, rosetta_loss_weighted, LossWeights, PartitionedBatch, PrototypeBank};
use rosetta_lab::metrics::{EpisodeRecord, SampleRecord};
use rosetta_lab::model::{StatMode, TinyModel};
use rosetta_lab::stream::{substream, Domain};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for entries that are zero analytically (dead channels).
pub const ABS_FLOOR: f64 = 1e-7;

pub const ONLY_CSID: LossWeights = LossWeights { csid: 1.0, ang: 0.0, norm: 0.0 };
pub const ONLY_ANG: LossWeights = LossWeights { csid: 0.0, ang: 1.0, norm: 0.0 };
pub const ONLY_NORM: LossWeights = LossWeights { csid: 0.0, ang: 0.0, norm: 1.0 };
pub const TOTAL: LossWeights = LossWeights { csid: 1.0, ang: 1.0, norm: 0.01 };

pub struct Instance {
    pub model: TinyModel,
    pub inputs: Array2<f64>,
    pub partition: PartitionedBatch,
    pub bank: PrototypeBank,
}

/// B = 32, d_feat = 16, K = 4 with perturbed affine parameters and prototypes.
pub fn instance(seed: u64) -> Instance {
    let mut rng = substream(seed, &[0xfd]);
    let mut model = TinyModel::new(32, 16, 4, seed);
    for g in model.bn.gamma.iter_mut() {
        *g = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    for b in model.bn.beta.iter_mut() {
        *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let inputs = Array2::from_shape_fn((32, 32), |_| rng.sample::<f64, _>(StandardNormal));
    let out = model.infer(&inputs, StatMode::Batch).unwrap();
    let mut flags: Vec<bool> = (0..32).map(|_| rng.random::<f64>() < 0.4).collect();
    flags[0] = false;
    flags[1] = true;
    let partition = PartitionedBatch::from_flags(&flags, &out.predictions()).unwrap();
    let mut bank = PrototypeBank::from_classifier(&model.w_l);
    for p in bank.prototypes.iter_mut() {
        *p += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    Instance {
        model,
        inputs,
        partition,
        bank,
    }
}

pub fn loss_at(inst: &Instance, params: &[f64], w: LossWeights) -> f64 {
    let mut m = inst.model.clone();
    m.set_trainable_parameters(params).unwrap();
    let out = m.infer(&inst.inputs, StatMode::Batch).unwrap();
    rosetta_loss_weighted(&inst.partition, &out, &inst.bank, 1.0, w).unwrap().total
}

/// Central differences over `[gamma.., beta..]`.
pub fn numeric(inst: &Instance, w: LossWeights) -> Vec<f64> {
    let p0 = inst.model.trainable_parameters();
    (0..p0.len())
        .map(|i| {
            let mut up = p0.clone();
            let mut dn = p0.clone();
            up[i] += H;
            dn[i] -= H;
            (loss_at(inst, &up, w) - loss_at(inst, &dn, w)) / (2.0 * H)
        })
        .collect()
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Worst relative error per term `[L_csID, L_ang, L_norm, total]` on one instance.
pub fn gradient_errors(seed: u64) -> [f64; 4] {
    let inst = instance(seed);
    let out = inst.model.infer(&inst.inputs, StatMode::Batch).unwrap();
    let g = grad_bn_from_output(&inst.model, &out, &inst.partition, &inst.bank, 1.0, TOTAL).unwrap();
    [
        max_rel_error(&g.csid.flatten(), &numeric(&inst, ONLY_CSID)),
        max_rel_error(&g.ang.flatten(), &numeric(&inst, ONLY_ANG)),
        max_rel_error(&g.norm.flatten(), &numeric(&inst, ONLY_NORM)),
        max_rel_error(&g.total.flatten(), &numeric(&inst, TOTAL)),
    ]
}

/// Up to 100 samples with scores on a coarse grid so ties are common.
pub fn random_record(seed: u64) -> EpisodeRecord {
    let mut rng = substream(seed, &[0x0e7c]);
    let n = rng.random_range(2..=100usize);
    let mut r = EpisodeRecord::new();
    for i in 0..n {
        let domain = match i {
            0 => Domain::Id,
            1 => Domain::Ood,
            _ if rng.random::<f64>() < 0.4 => Domain::Ood,
            _ => Domain::Id,
        };
        let true_class = (domain == Domain::Id).then(|| rng.random_range(0..4usize));
        r.push(SampleRecord {
            ood_score: f64::from(rng.random_range(-12i32..12)) * 0.25,
            domain,
            true_class,
            predicted_class: rng.random_range(0..4usize),
        })
        .unwrap();
    }
    r
}

fn split(r: &EpisodeRecord) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
    r.samples.iter().partition(|s| s.domain == Domain::Id)
}

/// Pairwise enumeration with half credit for ties.
pub fn auroc_pairs(r: &EpisodeRecord) -> f64 {
    let (id, ood) = split(r);
    let mut credit = 0.0;
    for o in &ood {
        for i in &id {
            if o.ood_score > i.ood_score {
                credit += 1.0;
            } else if o.ood_score == i.ood_score {
                credit += 0.5;
            }
        }
    }
    credit / (id.len() * ood.len()) as f64
}

/// Smallest csID score admitting at least 95% of csID.
pub fn fpr95_scan(r: &EpisodeRecord) -> f64 {
    let (id, ood) = split(r);
    let mut best: Option<f64> = None;
    for t in id.iter().map(|s| s.ood_score) {
        let accepted = id.iter().filter(|s| s.ood_score <= t).count();
        if 100 * accepted >= 95 * id.len() && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    ood.iter().filter(|s| s.ood_score <= t).count() as f64 / ood.len() as f64
}

/// Trapezoids over every distinct threshold, counting from scratch each time.
pub fn oscr_scan(r: &EpisodeRecord) -> f64 {
    let (id, ood) = split(r);
    let mut thresholds: Vec<f64> = r.samples.iter().map(|s| s.ood_score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (mut area, mut prev_fpr, mut prev_ccr) = (0.0, 0.0, 0.0);
    for t in thresholds {
        let correct = id
            .iter()
            .filter(|s| s.ood_score <= t && s.true_class == Some(s.predicted_class))
            .count();
        let fp = ood.iter().filter(|s| s.ood_score <= t).count();
        let fpr = fp as f64 / ood.len() as f64;
        let ccr = correct as f64 / id.len() as f64;
        area += (fpr - prev_fpr) * (ccr + prev_ccr) / 2.0;
        prev_fpr = fpr;
        prev_ccr = ccr;
    }
    area
}

/// Ordinary least-squares slope of `y` against `0..n`.
pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}
