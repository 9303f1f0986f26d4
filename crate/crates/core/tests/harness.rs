//! Episode-level contracts of the adaptation harness.

use std::sync::OnceLock;

use rosetta_lab::detectors::{PartitionerSpec, ScoreKind};
use rosetta_lab::harness::{
    audit_detectors, run_detector_audit, run_episode, run_sweep, with_mask, AdaptConfig, AdaptReport, Adapter,
    EpisodeConfig, LabConfig, LossMask, Method,
};
use rosetta_lab::model::TinyModel;
use rosetta_lab::stream::{CorruptionKind, Stream, StreamConfig};
use rosetta_lab::LabError;

fn source_model() -> &'static TinyModel {
    static MODEL: OnceLock<TinyModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = LabConfig::default();
        rosetta_lab::harness::pretrain_model(&cfg.stream, &cfg.pretrain).unwrap().0
    })
}

fn short_episode() -> EpisodeConfig {
    EpisodeConfig {
        corruptions: vec![CorruptionKind::GaussianNoise, CorruptionKind::AffineShift],
        continual: false,
    }
}

fn short(method: Method) -> AdaptConfig {
    AdaptConfig {
        batches_per_corruption: 12,
        ..AdaptConfig::with_method(method)
    }
}

fn episode(adapt: &AdaptConfig) -> AdaptReport {
    run_episode(&StreamConfig::default(), adapt, &short_episode(), source_model()).unwrap()
}

/// Same trajectory: metrics, the optimized total and the csID term.
fn assert_same_run(a: &AdaptReport, b: &AdaptReport) {
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.batches.len(), b.batches.len());
    for (x, y) in a.per_corruption.iter().zip(&b.per_corruption) {
        assert_eq!(x.report, y.report);
        assert_eq!(x.record, y.record);
    }
    for (x, y) in a.batches.iter().zip(&b.batches) {
        assert_eq!(x.loss.total, y.loss.total);
        assert_eq!(x.loss.csid, y.loss.csid);
        assert_eq!(x.feature_l2_csid, y.feature_l2_csid);
        assert_eq!(x.sorted_logits_csood, y.sorted_logits_csood);
    }
}

#[test]
fn source_steps_leave_the_model_bit_identical() {
    let stream = Stream::new(StreamConfig::default()).unwrap();
    let mut adapter = Adapter::new(source_model().clone(), &AdaptConfig::with_method(Method::Source)).unwrap();
    for t in 0..10 {
        adapter.step(&stream.sample_batch(t).unwrap().inputs).unwrap();
    }
    assert_eq!(&adapter.model, source_model());
}

#[test]
fn zero_learning_rate_keeps_affine_but_replaces_running_stats() {
    let stream = Stream::new(StreamConfig::default()).unwrap();
    let cfg = AdaptConfig {
        lr: 0.0,
        ..AdaptConfig::with_method(Method::Rosetta)
    };
    let mut adapter = Adapter::new(source_model().clone(), &cfg).unwrap();
    let batch = stream.sample_batch(3).unwrap();
    let step = adapter.step(&batch.inputs).unwrap();
    assert_eq!(adapter.model.trainable_parameters(), source_model().trainable_parameters());
    assert_eq!(adapter.model.bn.running_mean, step.output.batch_mean);
    assert_eq!(adapter.model.bn.running_var, step.output.batch_var);
    assert_ne!(adapter.model.bn.running_mean, source_model().bn.running_mean);
}

#[test]
fn csid_mask_equals_tent_csid_only() {
    let masked = episode(&with_mask(&short(Method::Rosetta), LossMask::CSID));
    let tent = episode(&short(Method::TentCsidOnly));
    assert_same_run(&masked, &tent);
}

#[test]
fn empty_mask_equals_bn_adapt() {
    let masked = episode(&with_mask(&short(Method::Rosetta), LossMask::NONE));
    let bn = episode(&short(Method::BnAdapt));
    assert_same_run(&masked, &bn);
}

#[test]
fn tau_zero_equals_csid_only() {
    let mut cfg = short(Method::Rosetta);
    cfg.loss.tau = 0.0;
    let rosetta = episode(&cfg);
    let tent = episode(&short(Method::TentCsidOnly));
    assert_same_run(&rosetta, &tent);
}

#[test]
fn episodes_are_deterministic() {
    let cfg = short(Method::Rosetta);
    let a = episode(&cfg);
    let b = episode(&cfg);
    assert_same_run(&a, &b);
    assert_eq!(a.batches, b.batches);
}

#[test]
fn report_lengths_match_batch_count() {
    let r = episode(&short(Method::Rosetta));
    assert_eq!(r.per_corruption.len(), 2);
    assert_eq!(r.batches.len(), 2 * 12);
    for c in &r.per_corruption {
        assert_eq!(r.batches_for(c.corruption).count(), 12);
        assert_eq!(c.record.len(), 12 * StreamConfig::default().batch_size);
    }
}

#[test]
fn reset_and_continual_agree_on_the_first_corruption_only() {
    let cfg = short(Method::Rosetta);
    let reset = episode(&cfg);
    let continual = run_episode(
        &StreamConfig::default(),
        &cfg,
        &EpisodeConfig {
            continual: true,
            ..short_episode()
        },
        source_model(),
    )
    .unwrap();
    assert_eq!(reset.per_corruption[0].report, continual.per_corruption[0].report);
    assert_ne!(reset.per_corruption[1].report, continual.per_corruption[1].report);
}

#[test]
fn id_only_stream_completes_and_reports_accuracy_only() {
    let stream = StreamConfig {
        ood_ratio: 0.0,
        ..StreamConfig::default()
    };
    let r = run_episode(&stream, &short(Method::Rosetta), &short_episode(), source_model()).unwrap();
    assert!(r.mean.acc > 0.0);
    assert_eq!(r.mean.auroc, None);
    assert_eq!(r.mean.oscr, None);
    assert!(r.batches.iter().all(|b| b.logit_l1_csood.is_none()));
}

#[test]
fn numeric_failures_name_the_batch() {
    let mut model = source_model().clone();
    model.w_l.fill(f64::MAX);
    let err = run_episode(&StreamConfig::default(), &short(Method::Rosetta), &short_episode(), &model).unwrap_err();
    match err {
        LabError::Episode { corruption, batch, .. } => {
            assert_eq!(corruption, "gaussian_noise");
            assert_eq!(batch, 0);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn sweep_grid_has_nine_finite_cells() {
    let mut cfg = LabConfig::default();
    cfg.adapt.batches_per_corruption = 4;
    cfg.episode.corruptions = vec![CorruptionKind::BlurSmooth];
    cfg.sweep.tau = vec![0.0, 1.0];
    let sweep = run_sweep(&cfg, source_model()).unwrap();
    assert_eq!(sweep.gamma_grid.len(), 9);
    assert!(sweep.gamma_grid.iter().all(|c| c.report.mean.oscr.is_some_and(f64::is_finite)));
    assert!(sweep.gamma_grid.iter().all(|c| c.tau == 1.0));
    assert_eq!(sweep.tau_line.len(), 2);
}

#[test]
fn detector_audit_shape_and_oracle_dominance() {
    let mut cfg = LabConfig::default();
    cfg.adapt.batches_per_corruption = 10;
    let audit = run_detector_audit(&cfg, source_model()).unwrap();
    assert_eq!(audit.detectors, audit_detectors().to_vec());
    assert_eq!(audit.accuracy.len(), 5);
    assert!(audit.accuracy.iter().all(|row| row.len() == CorruptionKind::ALL.len()));
    assert_eq!(audit.batches.len(), 10 * CorruptionKind::ALL.len());
    // Columns: gmm_energy, kmeans_entropy, kmeans_energy, oracle(entropy), oracle(energy).
    for b in &audit.batches {
        let a = &b.detector_acc;
        assert!(a[3] >= a[1]);
        assert!(a[4] >= a[0] && a[4] >= a[2]);
    }
}

#[test]
fn oracle_partitioner_cannot_drive_adaptation() {
    let cfg = AdaptConfig {
        partitioner: PartitionerSpec::OracleBestThreshold {
            score_kind: ScoreKind::Energy,
        },
        ..AdaptConfig::default()
    };
    assert!(matches!(Adapter::new(source_model().clone(), &cfg), Err(LabError::Config(_))));
}

#[test]
fn repeated_batch_lowers_the_csid_loss() {
    let stream = Stream::new(StreamConfig {
        ood_ratio: 0.0,
        ..StreamConfig::default()
    })
    .unwrap();
    let cfg = AdaptConfig {
        partitioner: PartitionerSpec::FixedThreshold {
            score_kind: ScoreKind::Energy,
            threshold: f64::INFINITY,
        },
        ..AdaptConfig::with_method(Method::TentCsidOnly)
    };
    let mut adapter = Adapter::new(source_model().clone(), &cfg).unwrap();
    let batch = stream.sample_batch(0).unwrap();
    let losses: Vec<f64> = (0..20)
        .map(|_| {
            let s = adapter.step(&batch.inputs).unwrap();
            assert!(s.partition.csood_indices.is_empty());
            s.loss.csid
        })
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{losses:?}");
    }
    assert!(losses[19] < losses[0]);
}
