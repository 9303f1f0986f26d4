//! Numerically stable scalar and vector primitives.
//!
//! Everything here works on plain `f64` slices. All functions are pure.

use std::ops::Deref;

use crate::error::{degenerate, domain, Result};

/// Tolerance on `Σ p = 1` accepted by [`ProbabilityVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex with at least two entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(domain(format!(
                "probability vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(p) = values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(domain(format!("probability entry {p} outside [0, 1]")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(domain(format!("{what}: non-finite input")))
    }
}

/// Softmax via max subtraction.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    ensure_finite(logits, "softmax")?;
    if logits.len() < 2 {
        return Err(domain("softmax needs at least 2 logits"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbabilityVector(out))
}

/// Unchecked softmax used on hot paths whose inputs are already validated.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(v_i)`, stable for large magnitudes.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(domain("log_sum_exp of empty vector"));
    }
    ensure_finite(v, "log_sum_exp")?;
    Ok(log_sum_exp_unchecked(v))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + total.ln()
}

/// Shannon entropy in nats, with `0 · log 0 = 0`.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    entropy_raw(p)
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&pk| pk > 0.0)
        .map(|&pk| pk * pk.ln())
        .sum::<f64>()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(crate::error::contract(format!(
            "cosine_similarity length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(degenerate("cosine similarity of a zero-norm vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean; `None` for an empty iterator.
pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|&x| close(x, 1.0 / 3.0, 1e-15)));

        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15));
        assert!(close(p[1], 1.0 / 3.0, 1e-15));

        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(&*p, &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(crate::LabError::Domain(_))
        ));
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!(close(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(
            log_sum_exp(&[1000.0, 1000.0]).unwrap(),
            1000.0 + 2f64.ln(),
            1e-12
        ));
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let uniform = ProbabilityVector::new(vec![0.25; 4]).unwrap();
        assert!(close(entropy(&uniform), 4f64.ln(), 1e-15));
        let onehot = ProbabilityVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&onehot), 0.0);
        let half = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        assert!(close(entropy(&half), 2f64.ln(), 1e-15));
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.0]).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbabilityVector::new(vec![0.5, 0.5 + 1e-12]).is_ok());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 4.0];
        assert!(close(cosine_similarity(&u, &u).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!(close(cosine_similarity(&u, &neg).unwrap(), -1.0, 1e-15));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(crate::LabError::Degenerate(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l1_norm(&[0.0; 5]), 0.0);
        assert_eq!(l2_norm(&[0.0; 5]), 0.0);
        assert_eq!(l1_norm(&[3.0, -4.0]), 7.0);
        assert_eq!(l2_norm(&[3.0, -4.0]), 5.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, len)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(x in finite_vec(2..12), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let a = softmax(&x).unwrap();
            let b = softmax(&shifted).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_and_max_at_constant(x in finite_vec(2..12), c in -20.0f64..20.0) {
            let k = x.len() as f64;
            let h = entropy(&softmax(&x).unwrap());
            prop_assert!(h >= 0.0 && h <= k.ln() + 1e-12);
            let flat = vec![c; x.len()];
            prop_assert!((entropy(&softmax(&flat).unwrap()) - k.ln()).abs() <= 1e-12);
        }

        #[test]
        fn log_sum_exp_bounds(x in finite_vec(1..20)) {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = log_sum_exp(&x).unwrap();
            prop_assert!(l >= m);
            prop_assert!(l <= m + (x.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(
            (u, v) in (2usize..10).prop_flat_map(|n| (finite_vec(n..n + 1), finite_vec(n..n + 1))),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&u) > 1e-3 && l2_norm(&v) > 1e-3);
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            let c0 = cosine_similarity(&u, &v).unwrap();
            let c1 = cosine_similarity(&su, &sv).unwrap();
            prop_assert!((c0 - c1).abs() <= 1e-12);
            prop_assert!((c0 - cosine_similarity(&v, &u).unwrap()).abs() <= 1e-15);
        }

        #[test]
        fn l1_homogeneous(x in finite_vec(1..10), c in -10.0f64..10.0) {
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            prop_assert!((l1_norm(&scaled) - c.abs() * l1_norm(&x)).abs() <= 1e-10);
        }
    }
}
