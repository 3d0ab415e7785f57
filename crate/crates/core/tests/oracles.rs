use sot_core::selfcheck::{oracle_suite, timed};

#[test]
fn fast_kernels_agree_with_reference_implementations() {
    let (checks, secs) = timed(|| oracle_suite(2).unwrap());
    for c in &checks {
        println!("{c}");
    }
    println!("{secs:.1}s");
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
