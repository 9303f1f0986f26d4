use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerSpec;
use crate::detectors::{PartitionerSpec, ScoreKind};
use crate::error::{LabError, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::stream::{CorruptionKind, StreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen model with running statistics.
    Source,
    /// Test-batch statistics, no gradient step.
    BnAdapt,
    /// Entropy minimization on presumed-csID samples.
    TentCsidOnly,
    Rosetta,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Source, Method::BnAdapt, Method::TentCsidOnly, Method::Rosetta];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnAdapt => "bn_adapt",
            Method::TentCsidOnly => "tent_csid_only",
            Method::Rosetta => "rosetta",
        }
    }

    pub fn mask(self) -> LossMask {
        match self {
            Method::Source | Method::BnAdapt => LossMask::NONE,
            Method::TentCsidOnly => LossMask::CSID,
            Method::Rosetta => LossMask::ALL,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which loss terms are active. Prototypes are tracked iff `ang` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LossMask {
    pub csid: bool,
    pub ang: bool,
    pub norm: bool,
}

impl LossMask {
    pub const NONE: LossMask = LossMask { csid: false, ang: false, norm: false };
    pub const CSID: LossMask = LossMask { csid: true, ang: false, norm: false };
    pub const CSID_ANG: LossMask = LossMask { csid: true, ang: true, norm: false };
    pub const ALL: LossMask = LossMask { csid: true, ang: true, norm: true };

    /// Rows of the ablation table, in order.
    pub const ABLATION: [LossMask; 4] = [LossMask::NONE, LossMask::CSID, LossMask::CSID_ANG, LossMask::ALL];

    pub fn is_empty(self) -> bool {
        !(self.csid || self.ang || self.norm)
    }

    pub fn label(self) -> String {
        let parts: Vec<&str> = [(self.csid, "csid"), (self.ang, "ang"), (self.norm, "norm")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn weights(self, loss: &LossConfig) -> LossWeights {
        let w = loss.weights();
        LossWeights {
            csid: if self.csid { w.csid } else { 0.0 },
            ang: if self.ang { w.ang } else { 0.0 },
            norm: if self.norm { w.norm } else { 0.0 },
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batches() -> usize {
    50
}
fn default_eval_score() -> ScoreKind {
    ScoreKind::Energy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub partitioner: PartitionerSpec,
    #[serde(default)]
    pub loss: LossConfig,
    /// Ignored by `source` and `bn_adapt`.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_batches")]
    pub batches_per_corruption: usize,
    /// OOD score used for evaluation metrics.
    #[serde(default = "default_eval_score")]
    pub eval_score: ScoreKind,
    /// Replaces the method's loss mask; set by the ablation grid.
    #[serde(skip)]
    pub mask_override: Option<LossMask>,
}

fn default_method() -> Method {
    Method::Rosetta
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            partitioner: PartitionerSpec::default(),
            loss: LossConfig::default(),
            lr: default_lr(),
            optimizer: OptimizerSpec::default(),
            batches_per_corruption: default_batches(),
            eval_score: default_eval_score(),
            mask_override: None,
        }
    }
}

impl AdaptConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn mask(&self) -> LossMask {
        self.mask_override.unwrap_or_else(|| self.method.mask())
    }

    pub fn label(&self) -> String {
        match self.mask_override {
            Some(m) => m.label(),
            None => self.method.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.partitioner.is_oracle() {
            return Err(LabError::Config(format!(
                "partitioner {} reads ground truth and cannot drive adaptation",
                self.partitioner.label()
            )));
        }
        self.partitioner.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(LabError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batches_per_corruption == 0 {
            return Err(LabError::Config("batches_per_corruption must be positive".into()));
        }
        if self.method == Method::Source && self.mask_override.is_some_and(|m| !m.is_empty()) {
            return Err(LabError::Config("source cannot carry a loss mask".into()));
        }
        Ok(())
    }
}

fn default_d_feat() -> usize {
    16
}
fn default_epochs() -> usize {
    200
}
fn default_pretrain_lr() -> f64 {
    0.1
}
fn default_n_per_class() -> usize {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_d_feat")]
    pub d_feat: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            d_feat: default_d_feat(),
            epochs: default_epochs(),
            lr: default_pretrain_lr(),
            n_per_class: default_n_per_class(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.n_per_class == 0 {
            return Err(LabError::Config("d_feat and n_per_class must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(LabError::Config(format!("pretrain lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

fn default_corruptions() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    #[serde(default = "default_corruptions")]
    pub corruptions: Vec<CorruptionKind>,
    /// Carry model and prototypes across corruptions instead of resetting.
    #[serde(default)]
    pub continual: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            corruptions: default_corruptions(),
            continual: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corruptions.is_empty() {
            return Err(LabError::Config("episode needs at least one corruption".into()));
        }
        Ok(())
    }
}

fn default_gamma1_list() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}
fn default_gamma2_list() -> Vec<f64> {
    vec![0.001, 0.01, 0.1]
}
fn default_tau_list() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_gamma1_list")]
    pub gamma1: Vec<f64>,
    #[serde(default = "default_gamma2_list")]
    pub gamma2: Vec<f64>,
    #[serde(default = "default_tau_list")]
    pub tau: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gamma1: default_gamma1_list(),
            gamma2: default_gamma2_list(),
            tau: default_tau_list(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1.is_empty() || self.gamma2.is_empty() || self.tau.is_empty() {
            return Err(LabError::Config("sweep lists must be non-empty".into()));
        }
        Ok(())
    }
}

/// Whole-run configuration; every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: LabConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.adapt.validate()?;
        self.pretrain.validate()?;
        self.episode.validate()?;
        self.sweep.validate()?;
        Ok(())
    }
}
