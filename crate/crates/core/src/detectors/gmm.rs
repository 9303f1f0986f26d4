//! Two-component univariate Gaussian mixture fitted by EM.

use std::f64::consts::PI;

use super::kmeans::kmeans2;
use crate::error::{degenerate, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-8;
pub const MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm2 {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: Gmm2,
    /// Log-likelihood of the initial model followed by one entry per EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl Gmm2 {
    fn log_joint(&self, x: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for c in 0..2 {
            let v = self.variances[c];
            out[c] = self.weights[c].ln() - 0.5 * (2.0 * PI * v).ln() - (x - self.means[c]).powi(2) / (2.0 * v);
        }
        out
    }

    /// Posterior component probabilities for one score.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let lj = self.log_joint(x);
        let m = lj[0].max(lj[1]);
        let e = [(lj[0] - m).exp(), (lj[1] - m).exp()];
        let s = e[0] + e[1];
        [e[0] / s, e[1] / s]
    }

    pub fn log_likelihood(&self, scores: &[f64]) -> f64 {
        scores
            .iter()
            .map(|&x| {
                let lj = self.log_joint(x);
                let m = lj[0].max(lj[1]);
                m + ((lj[0] - m).exp() + (lj[1] - m).exp()).ln()
            })
            .sum()
    }

    /// Index of the component with the larger mean.
    pub fn upper(&self) -> usize {
        usize::from(self.means[1] > self.means[0])
    }
}

fn m_step(scores: &[f64], resp: &[[f64; 2]], prev: &Gmm2) -> Gmm2 {
    let n = scores.len() as f64;
    let mut next = prev.clone();
    for c in 0..2 {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        if nk <= f64::MIN_POSITIVE {
            next.weights[c] = f64::MIN_POSITIVE;
            continue;
        }
        let mean = scores.iter().zip(resp).map(|(x, r)| r[c] * x).sum::<f64>() / nk;
        let var = scores
            .iter()
            .zip(resp)
            .map(|(x, r)| r[c] * (x - mean).powi(2))
            .sum::<f64>()
            / nk;
        next.means[c] = mean;
        next.variances[c] = var.max(VARIANCE_FLOOR);
        next.weights[c] = nk / n;
    }
    let total = next.weights[0] + next.weights[1];
    next.weights = [next.weights[0] / total, next.weights[1] / total];
    next
}

/// EM from the `kmeans2` split until the log-likelihood gain drops below
/// [`TOLERANCE`] or [`MAX_ITERS`] iterations run.
pub fn fit_gmm2(scores: &[f64]) -> Result<GmmFit> {
    if scores.len() < 4 {
        return Err(degenerate(format!(
            "GMM fit needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    let km = kmeans2(scores)?;
    let mut resp: Vec<[f64; 2]> = km
        .assignment
        .iter()
        .map(|&a| if a == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    let init = Gmm2 {
        means: km.centers,
        variances: [1.0; 2],
        weights: [0.5; 2],
    };
    let mut model = m_step(scores, &resp, &init);
    let mut trace = vec![model.log_likelihood(scores)];
    for _ in 0..MAX_ITERS {
        for (r, &x) in resp.iter_mut().zip(scores) {
            *r = model.responsibilities(x);
        }
        let next = m_step(scores, &resp, &model);
        let ll = next.log_likelihood(scores);
        let gain = ll - trace[trace.len() - 1];
        model = next;
        trace.push(ll);
        if gain < TOLERANCE {
            break;
        }
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
    })
}
