use pidssl::oracle::{run_suite, OracleConfig};

#[test]
fn default_suite_passes() {
    let report = run_suite(&OracleConfig::default()).unwrap();
    print!("{report}");
    assert!(report.all_passed(), "{:#?}", report.failures());
}
