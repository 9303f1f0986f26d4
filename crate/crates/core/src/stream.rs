//! Synthetic covariate-shift streams.
//!
//! In-distribution classes and unknown (OOD) classes are isotropic Gaussian
//! clusters around unit-norm means. Every random draw comes from a counter-based
//! substream keyed by `(seed, purpose, timestamp, sample index)`, so any batch can
//! be regenerated in isolation and in any order.

use std::fmt;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, LabError, Result};
use crate::mathcore::l2_norm;

const TAG_MEANS: u64 = 0x6d65_616e;
const TAG_BATCH_ID: u64 = 0x6261_7469;
const TAG_BATCH_OOD: u64 = 0x6261_746f;
const TAG_TRAIN: u64 = 0x7472_6169;

const MAX_MEAN_DRAWS: usize = 100_000;

/// Per-severity step sizes of the synthetic corruptions.
const NOISE_STEP: f64 = 0.07;
const SCALE_STEP: f64 = 0.6;
const DROP_STEP: f64 = 0.15;
const SHIFT_STEP: f64 = 0.4;
const BLUR_RADIUS: usize = 2;

pub const MAX_SEVERITY: u8 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from a root seed and a key path.
pub fn substream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Ground-truth domain of a test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "csID")]
    Id,
    #[serde(rename = "csOOD")]
    Ood,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Id => "csID",
            Domain::Ood => "csOOD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csID" => Ok(Domain::Id),
            "csOOD" => Ok(Domain::Ood),
            other => Err(contract(format!("unknown domain tag {other:?}"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformScale,
    FeatureDropout,
    AffineShift,
    BlurSmooth,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformScale,
        CorruptionKind::FeatureDropout,
        CorruptionKind::AffineShift,
        CorruptionKind::BlurSmooth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::UniformScale => "uniform_scale",
            CorruptionKind::FeatureDropout => "feature_dropout",
            CorruptionKind::AffineShift => "affine_shift",
            CorruptionKind::BlurSmooth => "blur_smooth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| contract(format!("unknown corruption kind {s:?}")))
    }

    fn key(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let spec = Self { kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(contract(format!(
                "severity {} outside 0..={MAX_SEVERITY}",
                self.severity
            )));
        }
        Ok(())
    }
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::GaussianNoise,
            severity: MAX_SEVERITY,
        }
    }
}

/// Fixed unit direction used by [`CorruptionKind::AffineShift`].
pub fn shift_direction(dim: usize) -> Array1<f64> {
    let v = Array1::from_shape_fn(dim, |j| ((j as f64) * 0.7 + 0.3).cos());
    let n = l2_norm(v.as_slice().unwrap());
    v / n
}

/// Applies one synthetic corruption. `rng` is the per-sample noise substream;
/// kinds without randomness ignore it.
pub fn corrupt(x: ArrayView1<f64>, spec: &CorruptionSpec, rng: &mut impl Rng) -> Result<Array1<f64>> {
    spec.validate()?;
    let s = spec.severity as f64;
    if spec.severity == 0 {
        return Ok(x.to_owned());
    }
    let d = x.len();
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sd = NOISE_STEP * s;
            x.mapv(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        }
        CorruptionKind::UniformScale => x.mapv(|v| v / (1.0 + SCALE_STEP * s)),
        CorruptionKind::FeatureDropout => {
            // Nested masks: a coordinate dropped at severity s is dropped at every s' > s.
            let p = DROP_STEP * s;
            x.mapv(|v| if rng.random::<f64>() < p { 0.0 } else { v })
        }
        CorruptionKind::AffineShift => &x + &(shift_direction(d) * (SHIFT_STEP * s)),
        CorruptionKind::BlurSmooth => {
            let w = s / MAX_SEVERITY as f64;
            let width = (2 * BLUR_RADIUS + 1) as f64;
            Array1::from_shape_fn(d, |j| {
                let blurred = (0..=2 * BLUR_RADIUS)
                    .map(|o| x[(j + d * BLUR_RADIUS + o - BLUR_RADIUS) % d])
                    .sum::<f64>()
                    / width;
                (1.0 - w) * x[j] + w * blurred
            })
        }
    };
    Ok(out)
}

fn default_min_angle() -> f64 {
    30.0
}

/// Parameters of a synthetic test stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// In-distribution class count.
    #[serde(rename = "K")]
    pub num_classes: usize,
    /// Unknown (OOD) class count.
    #[serde(rename = "F")]
    pub num_ood_classes: usize,
    pub d_in: usize,
    pub cluster_sigma: f64,
    pub batch_size: usize,
    /// csOOD : csID ratio.
    pub ood_ratio: f64,
    pub unknown_classes: usize,
    #[serde(default)]
    pub corruption: CorruptionSpec,
    #[serde(default)]
    pub seed: u64,
    /// Minimum pairwise angle between any two class means, degrees.
    #[serde(default = "default_min_angle")]
    pub min_angle_deg: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_ood_classes: 3,
            d_in: 32,
            cluster_sigma: 0.12,
            batch_size: 200,
            ood_ratio: 1.0,
            unknown_classes: 3,
            corruption: CorruptionSpec::default(),
            seed: 0,
            min_angle_deg: default_min_angle(),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("K must be >= 2, got {}", self.num_classes));
        }
        if self.num_ood_classes < 1 {
            return bad("F must be >= 1".into());
        }
        if self.d_in == 0 || self.batch_size == 0 {
            return bad("d_in and batch_size must be positive".into());
        }
        if !(self.cluster_sigma > 0.0 && self.cluster_sigma.is_finite()) {
            return bad(format!("cluster_sigma must be > 0, got {}", self.cluster_sigma));
        }
        if !(0.0..=1.0).contains(&self.ood_ratio) {
            return bad(format!("ood_ratio {} outside [0, 1]", self.ood_ratio));
        }
        if self.unknown_classes > self.num_ood_classes {
            return bad(format!(
                "unknown_classes {} exceeds F = {}",
                self.unknown_classes, self.num_ood_classes
            ));
        }
        if self.ood_ratio > 0.0 && self.unknown_classes == 0 {
            return bad("csOOD requested but unknown_classes = 0".into());
        }
        if !(0.0..180.0).contains(&self.min_angle_deg) {
            return bad(format!("min_angle_deg {} outside [0, 180)", self.min_angle_deg));
        }
        self.corruption
            .validate()
            .map_err(|e| LabError::Config(e.to_string()))
    }

    /// `(n_id, n_ood)` for one batch; the OOD count rounds half up.
    pub fn split_counts(&self) -> (usize, usize) {
        let r = self.ood_ratio;
        let n_ood = (self.batch_size as f64 * r / (1.0 + r) + 0.5).floor() as usize;
        let n_ood = n_ood.min(self.batch_size);
        (self.batch_size - n_ood, n_ood)
    }
}

/// Test batch with its hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Array2<f64>,
    /// Class index for csID samples, `None` for csOOD.
    pub true_class: Vec<Option<usize>>,
    pub domain: Vec<Domain>,
    pub severity: u8,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    pub fn count(&self, d: Domain) -> usize {
        self.domain.iter().filter(|&&x| x == d).count()
    }

    /// Stacks batches row-wise.
    pub fn concat(batches: &[LabeledBatch]) -> Result<LabeledBatch> {
        let first = batches.first().ok_or_else(|| contract("concat of zero batches"))?;
        let d = first.inputs.ncols();
        let n: usize = batches.iter().map(|b| b.len()).sum();
        let mut inputs = Array2::zeros((n, d));
        let mut true_class = Vec::with_capacity(n);
        let mut domain = Vec::with_capacity(n);
        let mut row = 0;
        for b in batches {
            if b.inputs.ncols() != d {
                return Err(contract("concat: input dimension mismatch"));
            }
            for r in b.inputs.rows() {
                inputs.row_mut(row).assign(&r);
                row += 1;
            }
            true_class.extend_from_slice(&b.true_class);
            domain.extend_from_slice(&b.domain);
        }
        Ok(LabeledBatch {
            inputs,
            true_class,
            domain,
            severity: first.severity,
        })
    }

    /// Writes `domain,true_class,x0,..` rows with a header.
    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["domain".to_string(), "true_class".to_string()];
        header.extend((0..self.inputs.ncols()).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        for (i, row) in self.inputs.rows().into_iter().enumerate() {
            let mut rec = vec![
                self.domain[i].to_string(),
                self.true_class[i].map(|c| c.to_string()).unwrap_or_default(),
            ];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_table<R: std::io::Read>(r: R, severity: u8) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        let mut true_class = Vec::new();
        let mut domain = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(contract("batch table row needs domain, class and inputs"));
            }
            domain.push(Domain::parse(&rec[0])?);
            true_class.push(if rec[1].is_empty() {
                None
            } else {
                Some(rec[1].parse().map_err(|_| contract("bad class index"))?)
            });
            let xs = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>().map_err(|_| contract(format!("bad number {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(xs);
        }
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(contract("ragged batch table"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let inputs = Array2::from_shape_vec((domain.len(), d), flat)
            .map_err(|e| contract(e.to_string()))?;
        Ok(Self {
            inputs,
            true_class,
            domain,
            severity,
        })
    }
}

/// Unit-norm class means separated by at least `min_angle_deg`, drawn by rejection.
pub fn make_class_means(
    num_classes: usize,
    num_ood: usize,
    d_in: usize,
    seed: u64,
    min_angle_deg: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let total = num_classes + num_ood;
    if total > d_in {
        log::warn!("K + F = {total} exceeds d_in = {d_in}; angular floor may be hard to meet");
    }
    let max_cos = min_angle_deg.to_radians().cos();
    let mut rng = substream(seed, &[TAG_MEANS]);
    let mut accepted: Vec<Array1<f64>> = Vec::with_capacity(total);
    let mut draws = 0;
    while accepted.len() < total {
        if draws == MAX_MEAN_DRAWS {
            return Err(LabError::Config(format!(
                "could not place {total} means in {d_in} dims with {min_angle_deg} degree separation"
            )));
        }
        draws += 1;
        let v = Array1::from_shape_fn(d_in, |_| rng.sample::<f64, _>(StandardNormal));
        let n = l2_norm(v.as_slice().unwrap());
        if n == 0.0 {
            continue;
        }
        let v = v / n;
        if accepted.iter().all(|a| a.dot(&v) <= max_cos) {
            accepted.push(v);
        }
    }
    let mut id = Array2::zeros((num_classes, d_in));
    let mut ood = Array2::zeros((num_ood, d_in));
    for (i, v) in accepted.into_iter().enumerate() {
        if i < num_classes {
            id.row_mut(i).assign(&v);
        } else {
            ood.row_mut(i - num_classes).assign(&v);
        }
    }
    Ok((id, ood))
}

/// A configured stream with its class means materialized.
#[derive(Debug, Clone)]
pub struct Stream {
    cfg: StreamConfig,
    id_means: Array2<f64>,
    ood_means: Array2<f64>,
}

impl Stream {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let (id_means, ood_means) = make_class_means(
            cfg.num_classes,
            cfg.num_ood_classes,
            cfg.d_in,
            cfg.seed,
            cfg.min_angle_deg,
        )?;
        Ok(Self {
            cfg,
            id_means,
            ood_means,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    pub fn id_means(&self) -> &Array2<f64> {
        &self.id_means
    }

    pub fn ood_means(&self) -> &Array2<f64> {
        &self.ood_means
    }

    fn draw(&self, mean: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let sigma = self.cfg.cluster_sigma;
        mean.mapv(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
    }

    /// Batch at timestamp `t` under the configured corruption.
    pub fn sample_batch(&self, t: u64) -> Result<LabeledBatch> {
        self.sample_batch_with(t, &self.cfg.corruption)
    }

    /// Batch at timestamp `t` under an explicit corruption. The clean draws depend only
    /// on `(seed, t)`, so different corruptions of the same `t` share clean samples.
    pub fn sample_batch_with(&self, t: u64, corruption: &CorruptionSpec) -> Result<LabeledBatch> {
        let (n_id, n_ood) = self.cfg.split_counts();
        let b = n_id + n_ood;
        let mut inputs = Array2::zeros((b, self.cfg.d_in));
        let mut true_class = Vec::with_capacity(b);
        let mut domain = Vec::with_capacity(b);
        for i in 0..b {
            let (tag, idx, is_id) = if i < n_id {
                (TAG_BATCH_ID, i, true)
            } else {
                (TAG_BATCH_OOD, i - n_id, false)
            };
            let mut rng = substream(self.cfg.seed, &[tag, t, idx as u64]);
            let (x, cls) = if is_id {
                let c = rng.random_range(0..self.cfg.num_classes);
                (self.draw(self.id_means.row(c), &mut rng), Some(c))
            } else {
                let c = rng.random_range(0..self.cfg.unknown_classes);
                (self.draw(self.ood_means.row(c), &mut rng), None)
            };
            let mut noise = substream(
                self.cfg.seed,
                &[tag, t, idx as u64, corruption.kind.key()],
            );
            inputs
                .row_mut(i)
                .assign(&corrupt(x.view(), corruption, &mut noise)?);
            true_class.push(cls);
            domain.push(if is_id { Domain::Id } else { Domain::Ood });
        }
        Ok(LabeledBatch {
            inputs,
            true_class,
            domain,
            severity: corruption.severity,
        })
    }

    /// Clean, class-balanced in-distribution samples chunked into `batch_size` batches.
    pub fn clean_training_set(&self, n_per_class: usize) -> Vec<LabeledBatch> {
        let k = self.cfg.num_classes;
        let d = self.cfg.d_in;
        let total = n_per_class * k;
        let mut out = Vec::new();
        let mut start = 0;
        while start < total {
            let end = (start + self.cfg.batch_size).min(total);
            let mut inputs = Array2::zeros((end - start, d));
            let mut true_class = Vec::with_capacity(end - start);
            for (row, flat) in (start..end).enumerate() {
                let (j, c) = (flat / k, flat % k);
                let mut rng = substream(self.cfg.seed, &[TAG_TRAIN, c as u64, j as u64]);
                inputs.row_mut(row).assign(&self.draw(self.id_means.row(c), &mut rng));
                true_class.push(Some(c));
            }
            out.push(LabeledBatch {
                inputs,
                true_class,
                domain: vec![Domain::Id; end - start],
                severity: 0,
            });
            start = end;
        }
        out
    }
}

pub fn sample_batch(cfg: &StreamConfig, t: u64) -> Result<LabeledBatch> {
    Stream::new(cfg.clone())?.sample_batch(t)
}

pub fn clean_training_set(cfg: &StreamConfig, n_per_class: usize) -> Result<Vec<LabeledBatch>> {
    Ok(Stream::new(cfg.clone())?.clean_training_set(n_per_class))
}
