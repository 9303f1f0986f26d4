//! Open-set evaluation metrics over one episode's per-sample records.
//!
//! The detection score is oriented larger-is-more-OOD. OSCR uses its negation
//! as the acceptance confidence.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{contract, Result};
use crate::stream::Domain;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub ood_score: f64,
    pub domain: Domain,
    /// `None` for csOOD samples.
    pub true_class: Option<usize>,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeRecord {
    pub samples: Vec<SampleRecord>,
}

impl EpisodeRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, s: SampleRecord) -> Result<()> {
        if !s.ood_score.is_finite() {
            return Err(contract("non-finite OOD score"));
        }
        match (s.domain, s.true_class) {
            (Domain::Id, None) => return Err(contract("csID sample without a class")),
            (Domain::Ood, Some(_)) => return Err(contract("csOOD sample carrying a class")),
            _ => {}
        }
        self.samples.push(s);
        Ok(())
    }

    pub fn extend(&mut self, other: &EpisodeRecord) {
        self.samples.extend_from_slice(&other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn scores(&self, d: Domain) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| s.domain == d)
            .map(|s| s.ood_score)
            .collect()
    }

    pub fn has_both_domains(&self) -> bool {
        let id = self.samples.iter().any(|s| s.domain == Domain::Id);
        let ood = self.samples.iter().any(|s| s.domain == Domain::Ood);
        id && ood
    }

    fn require_both(&self, what: &str) -> Result<()> {
        if self.has_both_domains() {
            Ok(())
        } else {
            Err(contract(format!("{what} needs both csID and csOOD samples")))
        }
    }

    /// `score,domain,true_class,predicted_class` rows with a header.
    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["score", "domain", "true_class", "predicted_class"])?;
        for s in &self.samples {
            wtr.write_record([
                format!("{:e}", s.ood_score),
                s.domain.to_string(),
                s.true_class.map(|c| c.to_string()).unwrap_or_default(),
                s.predicted_class.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_table<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = EpisodeRecord::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(contract("episode table rows need 4 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| contract(format!("bad score {s:?}")));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| contract(format!("bad class {s:?}")));
            out.push(SampleRecord {
                ood_score: num(&rec[0])?,
                domain: Domain::parse(&rec[1])?,
                true_class: if rec[2].is_empty() { None } else { Some(idx(&rec[2])?) },
                predicted_class: idx(&rec[3])?,
            })?;
        }
        Ok(out)
    }
}

/// Fraction of csID samples classified correctly; csOOD samples are ignored.
pub fn accuracy(record: &EpisodeRecord) -> Result<f64> {
    let (hits, n) = record
        .samples
        .iter()
        .filter(|s| s.domain == Domain::Id)
        .fold((0usize, 0usize), |(h, n), s| {
            (h + usize::from(s.true_class == Some(s.predicted_class)), n + 1)
        });
    if n == 0 {
        return Err(contract("accuracy needs at least one csID sample"));
    }
    Ok(hits as f64 / n as f64)
}

/// Mann-Whitney AUROC with half credit for ties; csOOD is the positive class.
pub fn auroc(record: &EpisodeRecord) -> Result<f64> {
    record.require_both("AUROC")?;
    let mut id = record.scores(Domain::Id);
    let ood = record.scores(Domain::Ood);
    id.sort_by(f64::total_cmp);
    let mut u = 0.0;
    for &s in &ood {
        let below = id.partition_point(|&x| x < s);
        let not_above = id.partition_point(|&x| x <= s);
        u += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(u / (id.len() as f64 * ood.len() as f64))
}

/// csOOD acceptance rate at the smallest threshold that accepts at least 95%
/// of csID (acceptance means `score <= t`).
pub fn fpr95(record: &EpisodeRecord) -> Result<f64> {
    fpr_at_tpr(record, 95)
}

/// Same as [`fpr95`] for an arbitrary integer TPR percentage.
pub fn fpr_at_tpr(record: &EpisodeRecord, tpr_percent: usize) -> Result<f64> {
    record.require_both("FPR")?;
    let mut id = record.scores(Domain::Id);
    let ood = record.scores(Domain::Ood);
    id.sort_by(f64::total_cmp);
    let n = id.len();
    // Smallest k with k/n >= p/100; the threshold is the k-th smallest ID score.
    let k = (tpr_percent * n).div_ceil(100).max(1);
    let t = id[k - 1];
    let accepted = ood.iter().filter(|&&s| s <= t).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Area under the (FPR, CCR) curve traced by sweeping the acceptance
/// confidence `-score` from above the maximum down past the minimum.
pub fn oscr(record: &EpisodeRecord) -> Result<f64> {
    record.require_both("OSCR")?;
    let n_id = record.samples.iter().filter(|s| s.domain == Domain::Id).count() as f64;
    let n_ood = record.samples.len() as f64 - n_id;
    let mut order: Vec<&SampleRecord> = record.samples.iter().collect();
    // Descending confidence = ascending score.
    order.sort_by(|a, b| a.ood_score.total_cmp(&b.ood_score));
    let mut correct = 0usize;
    let mut false_pos = 0usize;
    let (mut prev_fpr, mut prev_ccr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = order[i].ood_score;
        while i < order.len() && order[i].ood_score == v {
            let s = order[i];
            match s.domain {
                Domain::Id => correct += usize::from(s.true_class == Some(s.predicted_class)),
                Domain::Ood => false_pos += 1,
            }
            i += 1;
        }
        let fpr = false_pos as f64 / n_ood;
        let ccr = correct as f64 / n_id;
        area += (fpr - prev_fpr) * (ccr + prev_ccr) / 2.0;
        prev_fpr = fpr;
        prev_ccr = ccr;
    }
    Ok(area)
}

/// Harmonic mean of accuracy and AUROC.
pub fn h_score(acc: f64, auroc: f64) -> f64 {
    if acc <= 0.0 || auroc <= 0.0 {
        0.0
    } else {
        2.0 * acc * auroc / (acc + auroc)
    }
}

/// Metrics for one evaluation unit, all in `[0, 1]`. Detection metrics are
/// absent when the record lacks csOOD samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub oscr: Option<f64>,
    pub h_score: Option<f64>,
    pub detector_acc: Option<f64>,
}

impl MetricsReport {
    pub fn evaluate(record: &EpisodeRecord, detector_acc: Option<f64>) -> Result<Self> {
        let acc = accuracy(record)?;
        if record.has_both_domains() {
            let auroc = auroc(record)?;
            Ok(Self {
                acc,
                auroc: Some(auroc),
                fpr95: Some(fpr95(record)?),
                oscr: Some(oscr(record)?),
                h_score: Some(h_score(acc, auroc)),
                detector_acc,
            })
        } else {
            Ok(Self {
                acc,
                auroc: None,
                fpr95: None,
                oscr: None,
                h_score: None,
                detector_acc,
            })
        }
    }

    /// Field-wise mean; optional fields average over the reports that have them.
    pub fn macro_mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(contract("macro mean of zero reports"));
        }
        let n = reports.len() as f64;
        let opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Ok(Self {
            acc: reports.iter().map(|r| r.acc).sum::<f64>() / n,
            auroc: opt(|r| r.auroc),
            fpr95: opt(|r| r.fpr95),
            oscr: opt(|r| r.oscr),
            h_score: opt(|r| r.h_score),
            detector_acc: opt(|r| r.detector_acc),
        })
    }

    /// `acc,auroc,fpr95,oscr,h_score,detector_acc` scaled by 100, two decimals;
    /// missing values are empty fields.
    pub fn csv_fields(&self) -> [String; 6] {
        let f = |v: Option<f64>| v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_default();
        [
            f(Some(self.acc)),
            f(self.auroc),
            f(self.fpr95),
            f(self.oscr),
            f(self.h_score),
            f(self.detector_acc),
        ]
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["acc", "auroc", "fpr95", "oscr", "h_score", "detector_acc"];
