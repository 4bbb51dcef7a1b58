//! Seeded runs are bit-for-bit reproducible.

mod common;

#[test]
fn seeded_run_matches_golden_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = common::golden_run(a.path());
    assert_eq!(ha, common::golden_run(b.path()), "two runs differ");
    assert_eq!(ha, common::GOLDEN_RUN_SHA256);
}
