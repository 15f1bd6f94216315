use std::time::Instant;

use deformdet::deform::inject_offset_grad_sign_bug;
use deformdet::gradcheck::{run_suite, REL_TOL};

#[test]
fn suite_passes_on_five_seeds() {
    let start = Instant::now();
    for seed in 0..5 {
        let report = run_suite(seed).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        for op in ["conv", "bilinear", "deform-conv", "backbone", "dfpn", "head-loss"] {
            assert!(report.results.iter().any(|r| r.op == op), "{op} not covered");
            assert!(report.max_rel(op) <= REL_TOL);
        }
    }
    assert!(start.elapsed().as_secs_f64() < 60.0, "{:?}", start.elapsed());
}

#[test]
fn flipped_offset_gradient_is_caught() {
    inject_offset_grad_sign_bug(true);
    let report = run_suite(0);
    inject_offset_grad_sign_bug(false);
    let report = report.unwrap();
    assert!(!report.passed());
    let failing = report.failing_ops();
    assert!(failing.contains(&"deform-conv"), "{failing:?}");
    assert!(!failing.contains(&"conv"));
    assert!(!failing.contains(&"dfpn"));
}

#[test]
fn report_lists_every_check() {
    let report = run_suite(3).unwrap();
    let text = report.to_text();
    assert_eq!(text.lines().count(), report.results.len() + 1);
    assert!(text.contains("deform-conv.s1.offsets"));
}
