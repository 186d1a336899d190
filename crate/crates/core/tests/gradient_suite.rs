//! The central-difference gradient suite as an integration gate: every
//! registered operation and both training objectives must pass at their
//! stated tolerances, across several seeds.

use apf_core::gradcheck::run_gradient_suite;

#[test]
fn every_gradient_check_passes_across_seeds() {
    for seed in [0, 7, 1234] {
        let report = run_gradient_suite(seed).unwrap();
        assert!(report.results.len() >= 18, "suite shrank to {} cases", report.results.len());
        for r in &report.results {
            assert!(
                r.max_rel_error < r.tolerance,
                "seed {seed}: `{}` at rel. error {:.3e} (tolerance {:.0e})",
                r.name,
                r.max_rel_error,
                r.tolerance
            );
            assert!(r.tolerance <= 1e-4, "`{}` declares a loose tolerance", r.name);
        }
        assert!(report.all_passed());
    }
}

#[test]
fn suite_covers_both_training_objectives() {
    let report = run_gradient_suite(3).unwrap();
    let names: Vec<&str> = report.results.iter().map(|r| r.name.as_str()).collect();
    assert!(
        names.iter().any(|n| n.starts_with("objective.pretrain")),
        "no contrastive-objective check among {names:?}"
    );
    for variant in ["gated", "attention", "mean", "concat"] {
        let tag = format!("objective.finetune.{variant}");
        assert!(
            names.iter().any(|n| n.starts_with(&tag)),
            "no `{tag}` check among {names:?}"
        );
    }
}
