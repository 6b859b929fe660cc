mod common;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, r) in common::gradient_suite() {
        println!("{name:<28} max rel error {:.2e} over {} elements", r.max_rel_error, r.checked);
        if r.max_rel_error.is_nan() || r.max_rel_error >= common::TOLERANCE {
            failures.push(format!("{name}: {:.3e} at {:?}", r.max_rel_error, r.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
