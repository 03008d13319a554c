mod support;

use support::gradients::{composite_worst, primitive_worst, COMPOSITE_TOL, PRIMITIVES, PRIMITIVE_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, case) in PRIMITIVES {
        let worst = primitive_worst(case).unwrap();
        assert!(worst <= PRIMITIVE_TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn interpretable_model_matches_finite_differences() {
    let (worst, _) = composite_worst().unwrap();
    assert!(worst <= COMPOSITE_TOL, "max relative error {worst:e}");
}
