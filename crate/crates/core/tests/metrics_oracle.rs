//! Open-set metrics against brute-force enumeration.

mod common;

use common::{auroc_pairs, fpr95_scan, oscr_scan, random_record};
use proptest::prelude::*;
use rosetta_lab::metrics::{auroc, fpr95, oscr, EpisodeRecord, SampleRecord};
use rosetta_lab::stream::Domain;

const INSTANCES: u64 = 100;

#[test]
fn metrics_equal_their_oracles_exactly() {
    let start = std::time::Instant::now();
    for seed in 0..INSTANCES {
        let r = random_record(seed);
        assert_eq!(auroc(&r).unwrap(), auroc_pairs(&r), "AUROC seed {seed}");
        assert_eq!(fpr95(&r).unwrap(), fpr95_scan(&r), "FPR95 seed {seed}");
        assert_eq!(oscr(&r).unwrap(), oscr_scan(&r), "OSCR seed {seed}");
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn perfect_separation_and_perfect_classifier() {
    let mut r = EpisodeRecord::new();
    for i in 0..10 {
        let ood = i >= 6;
        r.push(SampleRecord {
            ood_score: i as f64,
            domain: if ood { Domain::Ood } else { Domain::Id },
            true_class: (!ood).then_some(1),
            predicted_class: 1,
        })
        .unwrap();
    }
    assert_eq!(auroc(&r).unwrap(), 1.0);
    assert_eq!(fpr95(&r).unwrap(), 0.0);
    assert_eq!(oscr(&r).unwrap(), 1.0);
}

#[test]
fn single_domain_records_are_rejected() {
    let mut r = EpisodeRecord::new();
    r.push(SampleRecord {
        ood_score: 0.0,
        domain: Domain::Id,
        true_class: Some(0),
        predicted_class: 0,
    })
    .unwrap();
    assert!(auroc(&r).is_err());
    assert!(fpr95(&r).is_err());
    assert!(oscr(&r).is_err());
}

fn flipped(r: &EpisodeRecord) -> EpisodeRecord {
    let mut f = r.clone();
    for s in &mut f.samples {
        s.ood_score = -s.ood_score;
    }
    f
}

proptest! {
    #[test]
    fn auroc_is_antisymmetric_under_negation(seed in 0u64..10_000) {
        let r = random_record(seed);
        let a = auroc(&r).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auroc(&flipped(&r)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oscr_is_bounded_by_accuracy(seed in 0u64..10_000) {
        let r = random_record(seed);
        let acc = rosetta_lab::metrics::accuracy(&r).unwrap();
        let o = oscr(&r).unwrap();
        prop_assert!(o >= 0.0 && o <= acc + 1e-12);
        prop_assert!((0.0..=1.0).contains(&fpr95(&r).unwrap()));
    }

    #[test]
    fn metrics_ignore_sample_order(seed in 0u64..10_000, rot in 0usize..100) {
        let r = random_record(seed);
        let mut s = r.clone();
        let k = rot % s.samples.len();
        s.samples.rotate_left(k);
        prop_assert_eq!(auroc(&r).unwrap(), auroc(&s).unwrap());
        prop_assert_eq!(fpr95(&r).unwrap(), fpr95(&s).unwrap());
        prop_assert!((oscr(&r).unwrap() - oscr(&s).unwrap()).abs() < 1e-12);
    }
}
