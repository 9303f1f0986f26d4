use crate::error::{degenerate, Result};

const MAX_ITERS: usize = 1000;

/// Two-center Lloyd clustering of scalar scores.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans2 {
    /// `centers[0] <= centers[1]`.
    pub centers: [f64; 2],
    /// 0 for the lower center, 1 for the upper.
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn assign(scores: &[f64], centers: [f64; 2]) -> Vec<usize> {
    scores
        .iter()
        .map(|&x| usize::from((x - centers[1]).abs() < (x - centers[0]).abs()))
        .collect()
}

/// Lloyd iterations started from `(min, max)` until assignments stop changing.
/// Equidistant points go to the lower center.
pub fn kmeans2(scores: &[f64]) -> Result<KMeans2> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if scores.len() < 2 || !(lo < hi) {
        return Err(degenerate("kmeans2 needs at least two distinct scores"));
    }
    let mut centers = [lo, hi];
    let mut assignment = assign(scores, centers);
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        let mut sum = [0.0; 2];
        let mut count = [0usize; 2];
        for (&x, &a) in scores.iter().zip(&assignment) {
            sum[a] += x;
            count[a] += 1;
        }
        for c in 0..2 {
            if count[c] > 0 {
                centers[c] = sum[c] / count[c] as f64;
            }
        }
        let next = assign(scores, centers);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(KMeans2 {
        centers,
        assignment,
        iterations,
    })
}
