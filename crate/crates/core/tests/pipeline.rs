//! Generate, persist, reload and fit through the public API.

use ztpc::io::{read_counts, read_model, read_observation_set, write_counts, write_model, write_observation_set};
use ztpc::{fit, make_instance, relative_error, EstimatorKind, FitSpec, GenConfig, ObservationSet};

fn small() -> GenConfig {
    GenConfig { dims: vec![12, 10, 8], rank: 2, beta: 0.5, alpha: 3.0, seed: 17 }
}

#[test]
fn files_round_trip_and_fit_identically() {
    let inst = make_instance(&small(), 600).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_model(p("truth.json"), &inst.truth).unwrap();
    write_counts(p("counts.tns"), &inst.counts).unwrap();
    write_observation_set(p("omega.txt"), &inst.omega).unwrap();

    let truth = read_model(p("truth.json")).unwrap();
    let omega = read_observation_set(p("omega.txt"), None).unwrap();
    let counts = read_counts(p("counts.tns"), Some(omega.shape())).unwrap();
    assert_eq!(relative_error(&inst.truth, &truth).unwrap(), 0.0);
    assert_eq!(omega.indices(), inst.omega.indices());
    assert_eq!(counts.nnz(), inst.counts.nnz());

    for kind in EstimatorKind::ALL {
        let spec = FitSpec::new(kind, 2, 5);
        let a = fit(&spec, &inst.counts, &inst.omega, Some(&inst.truth)).unwrap();
        let b = fit(&spec, &counts, &omega, Some(&truth)).unwrap();
        assert_eq!(a.final_nll.to_bits(), b.final_nll.to_bits(), "{kind}");
        assert_eq!(a.rel_error, b.rel_error);
    }
}

#[test]
fn every_estimator_beats_the_truth_on_its_own_objective() {
    let inst = make_instance(&small(), 960).unwrap();
    for kind in EstimatorKind::ALL {
        let r = fit(&FitSpec::new(kind, 2, 3), &inst.counts, &inst.omega, Some(&inst.truth)).unwrap();
        assert_eq!(r.beats_truth(1e-8), Some(true), "{kind}: {} vs {:?}", r.final_nll, r.truth_nll);
        let e = r.rel_error.unwrap();
        assert!(e.is_finite() && e < 1.0, "{kind}: rel error {e}");
        // Traces never increase.
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
    }
}

#[test]
fn full_trusted_set_makes_poisson_and_oracle_agree() {
    let cfg = small();
    let total = cfg.dims.iter().product();
    let inst = make_instance(&cfg, total).unwrap();
    assert_eq!(inst.omega.len(), total);
    let full = ObservationSet::full(inst.counts.shape().clone());
    let p = fit(&FitSpec::new(EstimatorKind::Poisson, 2, 9), &inst.counts, &full, None).unwrap();
    let o = fit(&FitSpec::new(EstimatorKind::Oracle, 2, 9), &inst.counts, &full, None).unwrap();
    assert!((p.final_nll - o.final_nll).abs() <= 1e-10 * p.final_nll.abs());
    assert!(relative_error(&p.model, &o.model).unwrap() <= 1e-10);
}
