use moesplat_core::experts::ExpertKind;
use moesplat_testkit::gradcheck::{self, TOLERANCE};

fn check_all(kind: ExpertKind, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let worst = gradcheck::expert(kind, seed);
        assert!(worst <= TOLERANCE, "{kind} seed {seed}: rel err {worst}");
    }
}

#[test]
fn polynomial_gradients_match_finite_differences() {
    check_all(ExpertKind::Polynomial, 0..50);
}

#[test]
fn keyframe_gradients_match_finite_differences() {
    check_all(ExpertKind::Keyframe, 100..150);
}

#[test]
fn deform_gradients_match_finite_differences() {
    check_all(ExpertKind::Deform, 200..250);
}
