//! Read-only SQL execution with a timeout, result-set comparison and
//! outcome classification.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{ExecutionOutcome, OutcomeKind, PreviewLimits, ResultPreview};
pub use crate::sqltext::detect_order_by;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_ROW_CAP: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ExecError {
    /// Syntax or semantic error, message as reported by the database.
    #[error("{0}")]
    Db(String),
    #[error("query timed out after {0} ms")]
    Timeout(u64),
    #[error("unknown database `{0}`")]
    UnknownDb(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Integer(_) | Value::Real(_) => 1,
            Value::Text(_) => 2,
            Value::Blob(_) => 3,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Integer(i) => Some(i as f64),
            Value::Real(r) => Some(r),
            _ => None,
        }
    }

    /// Total order used to canonicalize rows before multiset comparison.
    fn sort_cmp(&self, other: &Value) -> Ordering {
        self.rank().cmp(&other.rank()).then_with(|| match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Blob(a), Value::Blob(b)) => a.cmp(b),
            _ => match (self.as_f64(), other.as_f64()) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                _ => Ordering::Equal,
            },
        })
    }

    fn matches(&self, other: &Value, rel_tol: f64) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Blob(a), Value::Blob(b)) => a == b,
            _ => match (self.as_f64(), other.as_f64()) {
                (Some(a), Some(b)) => a == b || (a - b).abs() <= rel_tol * a.abs().max(b.abs()),
                _ => false,
            },
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(s) => f.write_str(s),
            Value::Blob(b) => write!(f, "<blob {} bytes>", b.len()),
        }
    }
}

impl From<ValueRef<'_>> for Value {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(r) => Value::Real(r),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// Set when materialization stopped at the row cap.
    #[serde(default)]
    pub truncated: bool,
}

impl ResultTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Value>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == columns.len()));
        Self {
            columns,
            rows,
            truncated: false,
        }
    }

    pub fn preview(&self, limits: PreviewLimits) -> ResultPreview {
        ResultPreview::new(
            self.columns.clone(),
            self.rows
                .iter()
                .map(|r| r.iter().map(Value::to_string).collect::<Vec<_>>()),
            limits,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPolicy {
    pub order_sensitive: bool,
    pub multiset: bool,
    pub float_tolerance: f64,
}

impl Default for ComparisonPolicy {
    fn default() -> Self {
        Self {
            order_sensitive: false,
            multiset: true,
            float_tolerance: 1e-6,
        }
    }
}

impl ComparisonPolicy {
    /// Order sensitivity follows the ground-truth query's top-level ORDER BY.
    pub fn for_truth(truth_sql: &str) -> Self {
        Self {
            order_sensitive: detect_order_by(truth_sql),
            ..Self::default()
        }
    }
}

fn cmp_rows(a: &[Value], b: &[Value]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.sort_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Row-multiset equality (sequence equality when order matters). Column
/// names are ignored; column counts must agree.
pub fn compare(generated: &ResultTable, truth: &ResultTable, policy: &ComparisonPolicy) -> bool {
    if generated.columns.len() != truth.columns.len() || generated.rows.len() != truth.rows.len() {
        return false;
    }
    let row_eq = |a: &Vec<Value>, b: &Vec<Value>| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y, policy.float_tolerance))
    };
    if policy.order_sensitive {
        return generated.rows.iter().zip(&truth.rows).all(|(a, b)| row_eq(a, b));
    }
    let mut g: Vec<&Vec<Value>> = generated.rows.iter().collect();
    let mut t: Vec<&Vec<Value>> = truth.rows.iter().collect();
    g.sort_by(|a, b| cmp_rows(a, b));
    t.sort_by(|a, b| cmp_rows(a, b));
    g.iter().zip(&t).all(|(a, b)| row_eq(a, b))
}

/// Maps a generated query's execution onto the four-way outcome taxonomy.
/// `truth` must have executed successfully.
pub fn classify_outcome(
    generated: &Result<ResultTable, ExecError>,
    truth: &ResultTable,
    policy: &ComparisonPolicy,
) -> ExecutionOutcome {
    let table = match generated {
        Err(e) => return ExecutionOutcome::execution_error(e.to_string()),
        Ok(t) => t,
    };
    if compare(table, truth, policy) {
        return ExecutionOutcome::success();
    }
    let (kind, detail) = if table.rows.is_empty() && !truth.rows.is_empty() {
        (
            OutcomeKind::EmptyTable,
            format!("generated query returned no rows; expected {}", truth.rows.len()),
        )
    } else {
        (
            OutcomeKind::UndesiredResult,
            format!(
                "generated {} rows x {} columns; expected {} rows x {} columns",
                table.rows.len(),
                table.columns.len(),
                truth.rows.len(),
                truth.columns.len()
            ),
        )
    };
    ExecutionOutcome { kind, detail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerConfig {
    pub timeout_ms: u64,
    pub row_cap: usize,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            row_cap: DEFAULT_ROW_CAP,
        }
    }
}

/// Registry of SQLite files keyed by database id. Each call opens its own
/// read-only connection, so a runner can be shared across threads.
#[derive(Debug, Clone, Default)]
pub struct SqlRunner {
    databases: HashMap<String, PathBuf>,
    pub config: RunnerConfig,
}

impl SqlRunner {
    pub fn new(config: RunnerConfig) -> Self {
        Self {
            databases: HashMap::new(),
            config,
        }
    }

    pub fn register(&mut self, db_id: impl Into<String>, path: impl Into<PathBuf>) {
        self.databases.insert(db_id.into(), path.into());
    }

    /// Registers `<root>/database/<id>/<id>.sqlite` for each id.
    pub fn register_spider<'a>(&mut self, root: &Path, db_ids: impl IntoIterator<Item = &'a str>) {
        for id in db_ids {
            self.register(id, spider_db_path(root, id));
        }
    }

    pub fn has_db(&self, db_id: &str) -> bool {
        self.databases.contains_key(db_id)
    }

    pub fn execute(&self, db_id: &str, sql: &str) -> Result<ResultTable, ExecError> {
        self.execute_with_timeout(db_id, sql, self.config.timeout_ms)
    }

    pub fn execute_with_timeout(
        &self,
        db_id: &str,
        sql: &str,
        timeout_ms: u64,
    ) -> Result<ResultTable, ExecError> {
        let path = self
            .databases
            .get(db_id)
            .ok_or_else(|| ExecError::UnknownDb(db_id.to_string()))?;
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| ExecError::Db(format!("cannot open {}: {e}", path.display())))?;
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));

        let map_err = |e: rusqlite::Error| match e {
            rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::OperationInterrupted => {
                ExecError::Timeout(timeout_ms)
            }
            rusqlite::Error::SqliteFailure(_, Some(msg)) => ExecError::Db(msg),
            other => ExecError::Db(other.to_string()),
        };
        let mut stmt = conn.prepare(sql).map_err(map_err)?;
        let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let ncols = columns.len();
        let mut rows = stmt.query([]).map_err(map_err)?;
        let mut out = Vec::new();
        let mut truncated = false;
        while let Some(row) = rows.next().map_err(map_err)? {
            if out.len() >= self.config.row_cap {
                truncated = true;
                break;
            }
            let values = (0..ncols)
                .map(|i| row.get_ref(i).map(Value::from))
                .collect::<Result<Vec<_>, _>>()
                .map_err(map_err)?;
            out.push(values);
        }
        Ok(ResultTable {
            columns,
            rows: out,
            truncated,
        })
    }
}

pub fn spider_db_path(root: &Path, db_id: &str) -> PathBuf {
    root.join("database").join(db_id).join(format!("{db_id}.sqlite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: Vec<Vec<Value>>) -> ResultTable {
        let n = rows.first().map_or(1, |r| r.len());
        ResultTable::new((0..n).map(|i| format!("c{i}")).collect(), rows)
    }

    fn fixture() -> (tempfile::TempDir, SqlRunner) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t(a INTEGER, b TEXT, c REAL);
             INSERT INTO t VALUES (1,'x',1.5),(2,'y',2.5),(3,'x',NULL),(4,'z',4.0),(5,'y',0.5);",
        )
        .unwrap();
        let mut runner = SqlRunner::new(RunnerConfig::default());
        runner.register("f", &path);
        (dir, runner)
    }

    #[test]
    fn select_one() {
        let (_d, r) = fixture();
        let res = r.execute("f", "SELECT 1").unwrap();
        assert_eq!(res.rows, vec![vec![Value::Integer(1)]]);
        assert_eq!(res.columns.len(), 1);
    }

    #[test]
    fn db_error_text_preserved() {
        let (_d, r) = fixture();
        let err = r.execute("f", "SELECT no_such_col FROM t").unwrap_err();
        assert!(err.to_string().contains("no such column: no_such_col"), "{err}");
        assert_eq!(r.execute("nope", "SELECT 1"), Err(ExecError::UnknownDb("nope".into())));
    }

    #[test]
    fn hand_computed_grouping() {
        let (_d, r) = fixture();
        let res = r
            .execute("f", "SELECT b, count(*), sum(a) FROM t GROUP BY b ORDER BY b")
            .unwrap();
        let expected = vec![
            vec![Value::Text("x".into()), Value::Integer(2), Value::Integer(4)],
            vec![Value::Text("y".into()), Value::Integer(2), Value::Integer(7)],
            vec![Value::Text("z".into()), Value::Integer(1), Value::Integer(4)],
        ];
        assert_eq!(res.rows, expected);
    }

    #[test]
    fn read_only() {
        let (_d, r) = fixture();
        assert!(matches!(r.execute("f", "DELETE FROM t"), Err(ExecError::Db(_))));
        assert_eq!(r.execute("f", "SELECT count(*) FROM t").unwrap().rows[0][0], Value::Integer(5));
    }

    #[test]
    fn timeout_aborts() {
        let (_d, r) = fixture();
        let slow = "WITH RECURSIVE n(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM n) SELECT count(*) FROM n";
        assert_eq!(r.execute_with_timeout("f", slow, 50), Err(ExecError::Timeout(50)));
    }

    #[test]
    fn row_cap_truncates() {
        let (_d, mut r) = fixture();
        r.config.row_cap = 3;
        let res = r.execute("f", "SELECT a FROM t").unwrap();
        assert_eq!(res.rows.len(), 3);
        assert!(res.truncated);
    }

    #[test]
    fn compare_basics() {
        let a = t(vec![vec![Value::Integer(1)], vec![Value::Integer(2)]]);
        let b = t(vec![vec![Value::Integer(2)], vec![Value::Integer(1)]]);
        let unordered = ComparisonPolicy::default();
        let ordered = ComparisonPolicy {
            order_sensitive: true,
            ..unordered
        };
        assert!(compare(&a, &a, &unordered));
        assert!(compare(&a, &b, &unordered));
        assert!(!compare(&a, &b, &ordered));
    }

    #[test]
    fn compare_numeric_tolerance_and_nulls() {
        let p = ComparisonPolicy::default();
        let a = t(vec![vec![Value::Real(1.0), Value::Null]]);
        let b = t(vec![vec![Value::Integer(1), Value::Null]]);
        let c = t(vec![vec![Value::Real(1.0 + 1e-9), Value::Null]]);
        let d = t(vec![vec![Value::Real(1.001), Value::Null]]);
        let e = t(vec![vec![Value::Real(1.0), Value::Text("NULL".into())]]);
        assert!(compare(&a, &b, &p));
        assert!(compare(&a, &c, &p));
        assert!(!compare(&a, &d, &p));
        assert!(!compare(&a, &e, &p));
    }

    #[test]
    fn compare_is_multiset() {
        let p = ComparisonPolicy::default();
        let a = t(vec![vec![Value::Integer(1)], vec![Value::Integer(1)], vec![Value::Integer(2)]]);
        let b = t(vec![vec![Value::Integer(1)], vec![Value::Integer(2)], vec![Value::Integer(2)]]);
        assert!(!compare(&a, &b, &p));
    }

    #[test]
    fn classification() {
        let p = ComparisonPolicy::default();
        let truth = t(vec![vec![Value::Integer(1)]]);
        let empty = ResultTable::new(vec!["c0".into()], vec![]);
        assert_eq!(
            classify_outcome(&Err(ExecError::Db("no such column: x".into())), &truth, &p).kind,
            OutcomeKind::ExecutionError
        );
        assert_eq!(classify_outcome(&Ok(truth.clone()), &truth, &p).kind, OutcomeKind::Success);
        assert_eq!(classify_outcome(&Ok(empty.clone()), &truth, &p).kind, OutcomeKind::EmptyTable);
        assert_eq!(classify_outcome(&Ok(empty.clone()), &empty, &p).kind, OutcomeKind::Success);
        let other = t(vec![vec![Value::Integer(2)]]);
        assert_eq!(classify_outcome(&Ok(other), &truth, &p).kind, OutcomeKind::UndesiredResult);
    }
}
