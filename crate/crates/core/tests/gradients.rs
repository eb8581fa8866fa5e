mod common;

use common::{gradient_suite, FD_TOLERANCE};

#[test]
fn every_block_and_objective_matches_finite_differences() {
    for seed in 0..4 {
        for (name, err) in gradient_suite(seed) {
            assert!(err < FD_TOLERANCE, "seed {seed} {name}: rel err {err:.3e}");
        }
    }
}

#[test]
fn suite_covers_the_training_objectives() {
    let names: Vec<String> = gradient_suite(11).into_iter().map(|(n, _)| n).collect();
    for want in ["lm_forward", "dual_ga_generator", "ga_discriminator", "dual_ct_generator", "ct_critic"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    assert_eq!(names.iter().filter(|n| n.starts_with("dual_") && !n.ends_with("generator")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.starts_with("div_")).count(), 6);
}
