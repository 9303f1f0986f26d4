//! Episode orchestration, experiment grid, and file interfaces.

pub mod commands;
pub mod config;
pub mod episode;
pub mod experiments;
pub mod optim;
pub mod output;

pub use config::{AdaptConfig, EpisodeConfig, LabConfig, LossMask, Method, PretrainConfig, SweepConfig};
pub use episode::{adapt_step, logit_l1_gap, run_episode, with_mask, AdaptReport, Adapter, BatchDiagnostics, StepOutput};
pub use experiments::{audit_detectors, pretrain_model, run_ablation, run_detector_audit, run_sweep};
pub use optim::{Optimizer, OptimizerSpec};
