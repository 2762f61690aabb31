//! Domain vocabulary: schemas, cases, correction cases, error types and
//! execution outcomes, plus the structured-text form shared by prompts and
//! the embedder.
//!
//! The text layout is a sequence of uppercase section headers on their own
//! lines, always in the order `SCHEMA`, `QUESTION`, `SQL`, `RESULT`:
//!
//! ```text
//! SCHEMA
//! database: concert_singer
//! singer(singer_id:number, name:text)
//! concert(concert_id:number, singer_id:number)
//! FOREIGN KEY concert.singer_id -> singer.singer_id
//! QUESTION
//! How many singers are there?
//! SQL
//! SELECT count(*) FROM singer
//! RESULT
//! outcome: Success
//! columns: ["count(*)"]
//! row: ["6"]
//! rows: 1
//! ```
//!
//! Content lines of `QUESTION` and `SQL` that would read as a header (or
//! already start with a backslash) are prefixed with `\`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECTIONS: [&str; 4] = ["SCHEMA", "QUESTION", "SQL", "RESULT"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            column: column.into(),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

impl FromStr for ColumnRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().split_once('.') {
            Some((t, c)) if !t.is_empty() && !c.is_empty() => Ok(ColumnRef::new(t, c)),
            _ => Err(Error::invalid("column reference", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn new<N, T>(name: impl Into<String>, columns: impl IntoIterator<Item = (N, T)>) -> Self
    where
        N: Into<String>,
        T: Into<String>,
    {
        Self {
            name: name.into(),
            columns: columns
                .into_iter()
                .map(|(n, t)| Column {
                    name: n.into(),
                    ty: t.into().trim().to_string(),
                })
                .collect(),
        }
    }
}

/// Tables, columns and keys of one database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescription {
    pub db_id: String,
    pub tables: Vec<Table>,
    #[serde(default)]
    pub primary_keys: Vec<ColumnRef>,
    #[serde(default)]
    pub foreign_keys: Vec<(ColumnRef, ColumnRef)>,
}

impl SchemaDescription {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn has_column(&self, r: &ColumnRef) -> bool {
        self.table(&r.table)
            .is_some_and(|t| t.columns.iter().any(|c| c.name == r.column))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(Error::invalid("schema", format!("duplicate table `{}`", t.name)));
            }
            let mut cols = HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.as_str()) {
                    return Err(Error::invalid(
                        "schema",
                        format!("duplicate column `{}.{}`", t.name, c.name),
                    ));
                }
            }
        }
        for r in self
            .primary_keys
            .iter()
            .chain(self.foreign_keys.iter().flat_map(|(a, b)| [a, b]))
        {
            if !self.has_column(r) {
                return Err(Error::invalid("schema", format!("key references unknown column `{r}`")));
            }
        }
        Ok(())
    }
}

/// Classification of a generated query's execution against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    Success,
    ExecutionError,
    EmptyTable,
    UndesiredResult,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 4] = [
        OutcomeKind::Success,
        OutcomeKind::ExecutionError,
        OutcomeKind::EmptyTable,
        OutcomeKind::UndesiredResult,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Success => "Success",
            OutcomeKind::ExecutionError => "ExecutionError",
            OutcomeKind::EmptyTable => "EmptyTable",
            OutcomeKind::UndesiredResult => "UndesiredResult",
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OutcomeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::invalid("outcome kind", s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub kind: OutcomeKind,
    #[serde(default)]
    pub detail: String,
}

impl ExecutionOutcome {
    pub fn new(kind: OutcomeKind, detail: impl Into<String>) -> Result<Self> {
        let outcome = Self {
            kind,
            detail: detail.into(),
        };
        outcome.validate()?;
        Ok(outcome)
    }

    pub fn success() -> Self {
        Self {
            kind: OutcomeKind::Success,
            detail: String::new(),
        }
    }

    /// An execution error; an empty message is replaced by a placeholder.
    pub fn execution_error(message: impl Into<String>) -> Self {
        let mut detail = message.into();
        if detail.trim().is_empty() {
            detail = "unknown execution error".into();
        }
        Self {
            kind: OutcomeKind::ExecutionError,
            detail,
        }
    }

    pub fn is_success(&self) -> bool {
        self.kind == OutcomeKind::Success
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == OutcomeKind::ExecutionError && self.detail.trim().is_empty() {
            return Err(Error::invalid("outcome", "execution error without a message"));
        }
        Ok(())
    }
}

/// Bounds applied when a result table is turned into a prompt preview.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewLimits {
    pub max_rows: usize,
    pub max_value_chars: usize,
}

impl Default for PreviewLimits {
    fn default() -> Self {
        Self {
            max_rows: 10,
            max_value_chars: 64,
        }
    }
}

/// Elides `value` past `max_chars` characters, keeping a count of what was cut.
pub fn elide(value: &str, max_chars: usize) -> String {
    let count = value.chars().count();
    if count <= max_chars {
        return value.to_string();
    }
    let kept: String = value.chars().take(max_chars).collect();
    format!("{kept}...[+{} chars]", count - max_chars)
}

/// A bounded, stringified view of an execution result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultPreview {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub total_rows: usize,
}

impl ResultPreview {
    pub fn new<I, R>(columns: Vec<String>, rows: I, limits: PreviewLimits) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let mut kept = Vec::new();
        let mut total_rows = 0;
        for row in rows {
            if kept.len() < limits.max_rows {
                kept.push(
                    row.into_iter()
                        .map(|v| elide(&v, limits.max_value_chars))
                        .collect(),
                );
            }
            total_rows += 1;
        }
        Self {
            columns: columns
                .iter()
                .map(|c| elide(c, limits.max_value_chars))
                .collect(),
            rows: kept,
            total_rows,
        }
    }
}

/// One zero-shot (or correction) attempt: what was asked, what was generated,
/// and how it ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub schema: SchemaDescription,
    pub question: String,
    pub generated_sql: String,
    pub outcome: ExecutionOutcome,
    #[serde(default)]
    pub preview: Option<ResultPreview>,
}

impl Case {
    pub fn new(
        schema: SchemaDescription,
        question: impl Into<String>,
        generated_sql: impl Into<String>,
        outcome: ExecutionOutcome,
        preview: Option<ResultPreview>,
    ) -> Result<Self> {
        let case = Self {
            schema,
            question: question.into(),
            generated_sql: generated_sql.into(),
            outcome,
            preview,
        };
        case.validate(PreviewLimits::default())?;
        Ok(case)
    }

    pub fn validate(&self, limits: PreviewLimits) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::invalid("case", "empty question"));
        }
        self.outcome.validate()?;
        if let Some(p) = &self.preview {
            if p.rows.len() > limits.max_rows {
                return Err(Error::invalid(
                    "case",
                    format!("preview has {} rows, bound is {}", p.rows.len(), limits.max_rows),
                ));
            }
        }
        Ok(())
    }
}

/// Error label: one of `e1`..`e13` or the synthetic `success` label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ErrorId(u8);

impl ErrorId {
    pub const SUCCESS: ErrorId = ErrorId(0);

    /// `n` in 1..=13.
    pub fn error(n: u8) -> Option<Self> {
        (1..=13).contains(&n).then_some(ErrorId(n))
    }

    pub fn is_success(self) -> bool {
        self.0 == 0
    }

    /// 0 for `success`, otherwise the error number.
    pub fn number(self) -> u8 {
        self.0
    }

    /// All thirteen error ids, in catalog order.
    pub fn errors() -> impl Iterator<Item = ErrorId> {
        (1..=13).map(ErrorId)
    }

    /// Dense label index in 0..14 (`success` is 13).
    pub fn label_index(self) -> usize {
        if self.0 == 0 {
            13
        } else {
            self.0 as usize - 1
        }
    }

    /// Inverse of [`label_index`](Self::label_index).
    pub fn from_label_index(index: usize) -> Option<Self> {
        match index {
            13 => Some(Self::SUCCESS),
            0..=12 => Some(ErrorId(index as u8 + 1)),
            _ => None,
        }
    }

    pub fn error_type(self) -> &'static ErrorType {
        &CATALOG[self.label_index()]
    }
}

impl fmt::Display for ErrorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            f.write_str("success")
        } else {
            write!(f, "e{}", self.0)
        }
    }
}

impl FromStr for ErrorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "success" {
            return Ok(ErrorId::SUCCESS);
        }
        s.strip_prefix('e')
            .filter(|d| !d.is_empty() && d.len() <= 2 && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse().ok())
            .and_then(ErrorId::error)
            .ok_or_else(|| Error::invalid("error id", s))
    }
}

impl Serialize for ErrorId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ErrorId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorType {
    pub id: ErrorId,
    pub name: &'static str,
    pub short_explanation: &'static str,
}

const fn et(n: u8, name: &'static str, short_explanation: &'static str) -> ErrorType {
    ErrorType {
        id: ErrorId(n),
        name,
        short_explanation,
    }
}

/// The thirteen error types followed by `success`.
pub static CATALOG: [ErrorType; 14] = [
    et(1, "Other:DISTINCT", "Didn’t use or use keyword DISTINCT properly."),
    et(2, "Other:DESC", "Didn’t use or use keyword DESC properly."),
    et(3, "Other:Not Enough Value Information", "Wrong value in the WHERE clause."),
    et(4, "Schema-Linking:Wrong Cols", "Unnecessary or wrong columns in SELECT clause refer to question."),
    et(5, "Schema-Linking:Cond", "Missing or used wrong logic in the conditions."),
    et(6, "Nested:Wrong Sub Query", "Unnecessary or wrong sub query."),
    et(7, "Nested:Set Operation", "Didn’t used set operation."),
    et(8, "Join:Wrong Tables/Cols", "Joined unnecessary or wrong tables or columns."),
    et(9, "Join:Wrong Keyword", "Didn’t use JOIN keyword where it should be used or misuse LEFT/RIGHT JOIN."),
    et(10, "Invalid:Wrong Cols", "Use columns that do not exist in the table."),
    et(11, "Invalid:Alias", "Used same column name in a single statement without any alias."),
    et(12, "Group-by:Not Detected", "Didn’t use GROUP BY keyword where it should be used."),
    et(13, "Group-by:Wrong Cols", "Group by wrong columns or unnecessary group by."),
    et(0, "Success", "The SQL executed and matched the expected result."),
];

/// A labeled case curated for the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCase {
    pub case: Case,
    /// Most severe first.
    pub error_types: Vec<ErrorId>,
    pub ground_truth_sql: String,
    pub reason: String,
    pub instruction: String,
}

impl CorrectionCase {
    pub fn new(
        case: Case,
        error_types: Vec<ErrorId>,
        ground_truth_sql: impl Into<String>,
        reason: impl Into<String>,
        instruction: impl Into<String>,
    ) -> Result<Self> {
        let cc = Self {
            case,
            error_types,
            ground_truth_sql: ground_truth_sql.into(),
            reason: reason.into(),
            instruction: instruction.into(),
        };
        cc.validate()?;
        Ok(cc)
    }

    pub fn validate(&self) -> Result<()> {
        self.case.validate(PreviewLimits::default())?;
        if self.error_types.is_empty() {
            return Err(Error::invalid("correction case", "no error types"));
        }
        let unique: HashSet<_> = self.error_types.iter().collect();
        if unique.len() != self.error_types.len() {
            return Err(Error::invalid("correction case", "duplicate error types"));
        }
        if self.error_types.len() > 1 && self.error_types.iter().any(|e| e.is_success()) {
            return Err(Error::invalid("correction case", "`success` must be the only label"));
        }
        if self.ground_truth_sql.trim().is_empty() {
            return Err(Error::invalid("correction case", "empty ground-truth SQL"));
        }
        Ok(())
    }

    /// The label used for embedding training: the most severe error type.
    pub fn primary_label(&self) -> ErrorId {
        self.error_types[0]
    }
}

/// Renders the SCHEMA section body: a `database:` line, one
/// `table(col:type, …)` line per table, then foreign keys in input order.
pub fn render_schema(schema: &SchemaDescription) -> String {
    let mut out = format!("database: {}\n", schema.db_id);
    for t in &schema.tables {
        let cols: Vec<String> = t
            .columns
            .iter()
            .map(|c| format!("{}:{}", c.name, c.ty.trim()))
            .collect();
        out.push_str(&format!("{}({})\n", t.name, cols.join(", ")));
    }
    for (from, to) in &schema.foreign_keys {
        out.push_str(&format!("FOREIGN KEY {from} -> {to}\n"));
    }
    out
}

fn push_escaped(out: &mut String, text: &str) {
    for line in text.split('\n') {
        if SECTIONS.contains(&line) || line.starts_with('\\') {
            out.push('\\');
        }
        out.push_str(line);
        out.push('\n');
    }
}

fn json_line(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("string vectors always serialize")
}

/// Renders the RESULT section body.
pub fn render_result(outcome: &ExecutionOutcome, preview: Option<&ResultPreview>) -> String {
    let mut out = format!("outcome: {}\n", outcome.kind);
    if !outcome.detail.is_empty() {
        out.push_str(&format!("detail: {}\n", json_line(&outcome.detail)));
    }
    if let Some(p) = preview {
        out.push_str(&format!("columns: {}\n", json_line(&p.columns)));
        for row in &p.rows {
            out.push_str(&format!("row: {}\n", json_line(row)));
        }
        out.push_str(&format!("rows: {}\n", p.total_rows));
    }
    out
}

/// Deterministic structured text for prompts and embeddings.
pub fn serialize_case(case: &Case, include_result: bool) -> String {
    let mut out = String::from("SCHEMA\n");
    out.push_str(&render_schema(&case.schema));
    out.push_str("QUESTION\n");
    push_escaped(&mut out, &case.question);
    out.push_str("SQL\n");
    push_escaped(&mut out, &case.generated_sql);
    if include_result {
        out.push_str("RESULT\n");
        out.push_str(&render_result(&case.outcome, case.preview.as_ref()));
    }
    out
}

fn malformed(section: &str, reason: impl Into<String>) -> Error {
    Error::MalformedSection {
        section: section.to_string(),
        reason: reason.into(),
    }
}

/// Splits `text` into the four section bodies, enforcing presence and order.
fn split_sections(text: &str) -> Result<[Vec<&str>; 4]> {
    let mut bodies: [Vec<&str>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        if let Some(idx) = SECTIONS.iter().position(|s| *s == line) {
            let expected = current.map_or(0, |c| c + 1);
            if idx != expected {
                let want = SECTIONS.get(expected).copied().unwrap_or("end of text");
                return Err(malformed(
                    SECTIONS[expected.min(3)],
                    format!("expected {want}, found {line}"),
                ));
            }
            current = Some(idx);
            continue;
        }
        match current {
            Some(c) => bodies[c].push(line),
            None if line.trim().is_empty() => {}
            None => return Err(malformed("SCHEMA", "text does not start with SCHEMA")),
        }
    }
    let seen = current.map_or(0, |c| c + 1);
    if seen < SECTIONS.len() {
        return Err(malformed(SECTIONS[seen], "section missing"));
    }
    Ok(bodies)
}

fn unescape(lines: &[&str]) -> String {
    lines
        .iter()
        .map(|l| l.strip_prefix('\\').unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_schema(lines: &[&str]) -> Result<SchemaDescription> {
    let err = |r: String| malformed("SCHEMA", r);
    let mut iter = lines.iter();
    let db_id = iter
        .next()
        .and_then(|l| l.strip_prefix("database: "))
        .ok_or_else(|| err("missing `database:` line".into()))?
        .to_string();
    let mut tables = Vec::new();
    let mut foreign_keys = Vec::new();
    for line in iter {
        if let Some(fk) = line.strip_prefix("FOREIGN KEY ") {
            let (from, to) = fk
                .split_once(" -> ")
                .ok_or_else(|| err(format!("bad foreign key line `{line}`")))?;
            foreign_keys.push((from.parse().map_err(|_| err(format!("bad column ref `{from}`")))?,
                               to.parse().map_err(|_| err(format!("bad column ref `{to}`")))?));
            continue;
        }
        if !foreign_keys.is_empty() {
            return Err(err(format!("table line after foreign keys: `{line}`")));
        }
        let (name, rest) = line
            .split_once('(')
            .ok_or_else(|| err(format!("bad table line `{line}`")))?;
        let cols = rest
            .strip_suffix(')')
            .ok_or_else(|| err(format!("unterminated table line `{line}`")))?;
        let columns = if cols.is_empty() {
            Vec::new()
        } else {
            cols.split(", ")
                .map(|c| {
                    c.rsplit_once(':')
                        .map(|(n, t)| Column {
                            name: n.to_string(),
                            ty: t.to_string(),
                        })
                        .ok_or_else(|| err(format!("bad column `{c}`")))
                })
                .collect::<Result<_>>()?
        };
        tables.push(Table {
            name: name.to_string(),
            columns,
        });
    }
    Ok(SchemaDescription {
        db_id,
        tables,
        primary_keys: Vec::new(),
        foreign_keys,
    })
}

fn parse_result(lines: &[&str]) -> Result<(ExecutionOutcome, Option<ResultPreview>)> {
    let err = |r: String| malformed("RESULT", r);
    let json_err = |e: serde_json::Error| err(e.to_string());
    let mut kind = None;
    let mut detail = String::new();
    let mut columns = None;
    let mut rows = Vec::new();
    let mut total = None;
    for line in lines {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| err(format!("bad line `{line}`")))?;
        match key {
            "outcome" => kind = Some(value.parse::<OutcomeKind>().map_err(|e| err(e.to_string()))?),
            "detail" => detail = serde_json::from_str(value).map_err(json_err)?,
            "columns" => columns = Some(serde_json::from_str(value).map_err(json_err)?),
            "row" => rows.push(serde_json::from_str(value).map_err(json_err)?),
            "rows" => total = Some(value.parse().map_err(|_| err(format!("bad row count `{value}`")))?),
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    let kind = kind.ok_or_else(|| err("missing outcome".into()))?;
    let outcome = ExecutionOutcome::new(kind, detail).map_err(|e| err(e.to_string()))?;
    let preview = match (columns, total) {
        (Some(columns), Some(total_rows)) => Some(ResultPreview {
            columns,
            rows,
            total_rows,
        }),
        (None, None) if rows.is_empty() => None,
        _ => return Err(err("incomplete result preview".into())),
    };
    Ok((outcome, preview))
}

/// Inverse of [`serialize_case`] with `include_result = true`.
pub fn parse_case(text: &str) -> Result<Case> {
    let [schema, question, sql, result] = split_sections(text)?;
    let schema = parse_schema(&schema)?;
    let question = unescape(&question);
    if question.trim().is_empty() {
        return Err(malformed("QUESTION", "empty question"));
    }
    let generated_sql = unescape(&sql);
    let (outcome, preview) = parse_result(&result)?;
    Ok(Case {
        schema,
        question,
        generated_sql,
        outcome,
        preview,
    })
}

/// The thirteen error types as an aligned plain-text table.
pub fn error_type_table_text() -> String {
    let rows: Vec<[String; 3]> = CATALOG[..13]
        .iter()
        .map(|t| [t.id.to_string(), t.name.to_string(), t.short_explanation.to_string()])
        .collect();
    let header = ["Error ID".to_string(), "Error Name".into(), "Short Explanation".into()];
    let width = |i: usize| {
        rows.iter()
            .chain(std::iter::once(&header))
            .map(|r| r[i].chars().count())
            .max()
            .unwrap_or(0)
    };
    let (w0, w1) = (width(0), width(1));
    let fmt_row = |r: &[String; 3]| {
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
        format!("{} | {} | {}\n", pad(&r[0], w0), pad(&r[1], w1), r[2])
    };
    let mut out = fmt_row(&header);
    out.push_str(&format!("{}-+-{}-+-{}\n", "-".repeat(w0), "-".repeat(w1), "-".repeat(width(2))));
    for r in &rows {
        out.push_str(&fmt_row(r));
    }
    out
}
