mod common {
    pub mod gradcases;
}

use common::gradcases::{linearity_gap, loss_terms, primitives, Case, INSTANCES, TOLERANCE};

fn run(cases: &[Case]) {
    let mut failures = Vec::new();
    for case in cases {
        let worst = (0..INSTANCES).map(|seed| (case.check)(seed).unwrap()).fold(0.0, f64::max);
        if !(worst <= TOLERANCE as f64) {
            failures.push(format!("{}: {worst:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn every_primitive_matches_central_differences() {
    run(&primitives());
}

#[test]
fn every_loss_term_matches_central_differences() {
    run(&loss_terms());
}

#[test]
fn gradient_of_a_sum_is_the_sum_of_gradients() {
    for seed in 0..INSTANCES {
        let gap = linearity_gap(seed).unwrap();
        assert!(gap <= 1e-12, "seed {seed}: {gap:e}");
    }
}
