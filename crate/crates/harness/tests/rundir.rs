use refplan_harness::rundir::allocate;

#[test]
fn runs_never_overwrite_earlier_output() {
    let root = tempfile::tempdir().unwrap();
    let first = allocate(root.path(), "exp").unwrap();
    assert_eq!(first, root.path().join("exp"));
    // Still empty, so it is reused.
    assert_eq!(allocate(root.path(), "exp").unwrap(), first);

    std::fs::write(first.join("metrics.csv"), "x").unwrap();
    let second = allocate(root.path(), "exp").unwrap();
    assert_eq!(second, root.path().join("exp-run-1"));
    let third = allocate(root.path(), "exp").unwrap();
    assert_eq!(third, root.path().join("exp-run-2"));
    assert_eq!(std::fs::read_to_string(first.join("metrics.csv")).unwrap(), "x");
    assert!(second.is_dir() && third.is_dir());
}
