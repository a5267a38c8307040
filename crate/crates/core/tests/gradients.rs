use std::time::Instant;

use lmd_core::gradsuite::{run_suite, SuiteOptions};

#[test]
fn full_suite_passes_quickly() {
    let start = Instant::now();
    let reports = run_suite(&SuiteOptions::default());
    let elapsed = start.elapsed().as_secs_f64();
    for r in &reports {
        println!(
            "{:<28} rel {:.2e} abs {:.2e} coords {}",
            r.op_name, r.max_rel_error, r.max_abs_error, r.coords_checked
        );
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(elapsed < 300.0, "suite took {elapsed:.1}s");
}
