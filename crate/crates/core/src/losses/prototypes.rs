use ndarray::{Array2, ArrayView2};

use crate::error::{contract, Result};
use crate::mathcore::l2_norm;

/// Per-class running-mean prototypes in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `K × d_feat`
    pub prototypes: Array2<f64>,
    pub initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn uninitialized(num_classes: usize, dim: usize) -> Self {
        Self {
            prototypes: Array2::zeros((num_classes, dim)),
            initialized: vec![false; num_classes],
        }
    }

    /// Seeds class `k` with column `k` of the classifier weight (`d_feat × K`).
    /// A zero column leaves its class uninitialized.
    pub fn from_classifier(w_l: &Array2<f64>) -> Self {
        let prototypes = w_l.t().as_standard_layout().into_owned();
        let initialized = prototypes
            .rows()
            .into_iter()
            .map(|r| l2_norm(r.as_slice().unwrap()) > 0.0)
            .collect();
        Self {
            prototypes,
            initialized,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Moving-average update `p_c <- (1 - alpha) p_c + alpha m_c`, where `m_c` is the
    /// mean feature of the samples pseudo-labelled `c`. All class means are
    /// computed before any blending, so row order inside the batch is irrelevant.
    pub fn update(&mut self, features: ArrayView2<f64>, labels: &[usize], alpha: f64) -> Result<()> {
        if features.nrows() != labels.len() {
            return Err(contract("features and pseudo-labels are not row-aligned"));
        }
        if features.ncols() != self.dim() {
            return Err(contract("feature dimension differs from prototype dimension"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(contract(format!("momentum {alpha} outside (0, 1]")));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(contract(format!("pseudo-label {bad} outside 0..{k}")));
        }
        let mut sums = Array2::<f64>::zeros((k, self.dim()));
        let mut counts = vec![0usize; k];
        for (row, &c) in features.rows().into_iter().zip(labels) {
            sums.row_mut(c).scaled_add(1.0, &row);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
            if self.initialized[c] {
                let blended = self.prototypes.row(c).mapv(|v| (1.0 - alpha) * v) + mean * alpha;
                self.prototypes.row_mut(c).assign(&blended);
            } else {
                self.prototypes.row_mut(c).assign(&mean);
                self.initialized[c] = true;
            }
        }
        Ok(())
    }
}
