//! Analytic BatchNorm-affine gradients against central finite differences.

mod common;

use common::{gradient_errors, instance, loss_at, ONLY_ANG, ONLY_CSID, ONLY_NORM, REL_TOL, TOTAL};
use rosetta_lab::losses::grad_bn_from_output;
use rosetta_lab::model::StatMode;

#[test]
fn every_component_matches_finite_differences() {
    let start = std::time::Instant::now();
    for seed in 0..20 {
        let errs = gradient_errors(seed);
        for (name, e) in ["L_csID", "L_ang", "L_norm", "L_ROSETTA"].iter().zip(errs) {
            assert!(e <= REL_TOL, "{name} seed {seed}: relative error {e:e}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn running_mode_outputs_are_refused() {
    let inst = instance(0);
    let out = inst.model.infer(&inst.inputs, StatMode::Running).unwrap();
    assert!(grad_bn_from_output(&inst.model, &out, &inst.partition, &inst.bank, 1.0, TOTAL).is_err());
}

#[test]
fn descent_direction_lowers_each_term() {
    for seed in 0..5 {
        let inst = instance(seed);
        let out = inst.model.infer(&inst.inputs, StatMode::Batch).unwrap();
        let g = grad_bn_from_output(&inst.model, &out, &inst.partition, &inst.bank, 1.0, TOTAL).unwrap();
        for (grad, w) in [(&g.csid, ONLY_CSID), (&g.ang, ONLY_ANG), (&g.norm, ONLY_NORM), (&g.total, TOTAL)] {
            let p0 = inst.model.trainable_parameters();
            let step: Vec<f64> = p0.iter().zip(grad.flatten()).map(|(p, d)| p - 1e-4 * d).collect();
            assert!(loss_at(&inst, &step, w) < loss_at(&inst, &p0, w));
        }
    }
}
