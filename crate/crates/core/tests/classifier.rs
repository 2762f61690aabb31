mod common;

use std::time::Instant;

use common::*;
use ecpt::case::OutcomeKind;
use ecpt::sqlrun::{classify_outcome, ComparisonPolicy, ExecError, RunnerConfig, SqlRunner};
use ecpt::sqltext::detect_order_by;

#[test]
fn fixture_suite_classifies_as_labeled() {
    let dir = tempfile::tempdir().unwrap();
    let runner = allergy_runner(dir.path());
    assert!(CLASSIFIER_CASES.len() >= 12);
    for kind in OutcomeKind::ALL {
        assert!(CLASSIFIER_CASES.iter().any(|c| c.2 == kind), "no case for {kind:?}");
    }
    for (truth, generated, expected) in CLASSIFIER_CASES {
        let t = runner.execute("allergy_1", truth).unwrap();
        let g = runner.execute("allergy_1", generated);
        let outcome = classify_outcome(&g, &t, &ComparisonPolicy::for_truth(truth));
        assert_eq!(outcome.kind, *expected, "{generated} vs {truth}: {}", outcome.detail);
        outcome.validate().unwrap();
        if outcome.kind == OutcomeKind::ExecutionError {
            assert!(!outcome.detail.is_empty());
        }
    }
}

#[test]
fn order_by_oracle() {
    assert_eq!(ORDER_BY_CASES.len(), 20);
    for (sql, expected) in ORDER_BY_CASES {
        assert_eq!(detect_order_by(sql), *expected, "{sql}");
    }
}

#[test]
fn unknown_db_and_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let runner = allergy_runner(dir.path());
    assert!(matches!(runner.execute("nope", "SELECT 1"), Err(ExecError::UnknownDb(_))));

    let endless = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
    let start = Instant::now();
    let r = runner.execute_with_timeout("allergy_1", endless, 200);
    assert!(matches!(r, Err(ExecError::Timeout(200))), "{r:?}");
    assert!(start.elapsed().as_secs() < 5);
}

#[test]
fn databases_are_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let runner = allergy_runner(dir.path());
    assert!(runner.execute("allergy_1", "DELETE FROM has_allergy").is_err());
    assert_eq!(runner.execute("allergy_1", "SELECT count(*) FROM has_allergy").unwrap().rows.len(), 1);
}

#[test]
fn row_cap_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let mut runner = SqlRunner::new(RunnerConfig {
        row_cap: 10,
        ..Default::default()
    });
    let path = dir.path().join("a.sqlite");
    rusqlite::Connection::open(&path).unwrap().execute_batch(ALLERGY_SQL).unwrap();
    runner.register("a", path);
    let t = runner
        .execute("a", "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c LIMIT 100) SELECT x FROM c")
        .unwrap();
    assert_eq!(t.rows.len(), 10);
    assert!(t.truncated);
}
