use cstr_validation::grad_cases::cases;

#[test]
fn every_operation_matches_finite_differences() {
    let mut failed = Vec::new();
    for (name, run) in cases() {
        let r = run();
        if !r.passed() {
            failed.push(format!(
                "{name}: {} points, worst {:.2e} at {}",
                r.points, r.worst, r.worst_at
            ));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
