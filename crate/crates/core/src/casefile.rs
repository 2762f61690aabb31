//! Line-delimited JSON file of correction cases: a header record carrying
//! the format version, then one record per case.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::case::{Case, CorrectionCase, ErrorId, ExecutionOutcome, ResultPreview, SchemaDescription};
use crate::error::{Error, Result};

pub const KB_VERSION: &str = "ecpt-kb/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub db_id: String,
    pub question: String,
    pub generated_sql: String,
    pub outcome: ExecutionOutcome,
    pub error_types: Vec<ErrorId>,
    pub ground_truth_sql: String,
    pub reason: String,
    pub instruction: String,
    /// Inline schema; when absent it is resolved from a catalog by `db_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<SchemaDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview: Option<ResultPreview>,
}

impl CorrectionRecord {
    pub fn from_case(cc: &CorrectionCase, inline_schema: bool) -> Self {
        Self {
            db_id: cc.case.schema.db_id.clone(),
            question: cc.case.question.clone(),
            generated_sql: cc.case.generated_sql.clone(),
            outcome: cc.case.outcome.clone(),
            error_types: cc.error_types.clone(),
            ground_truth_sql: cc.ground_truth_sql.clone(),
            reason: cc.reason.clone(),
            instruction: cc.instruction.clone(),
            schema: inline_schema.then(|| cc.case.schema.clone()),
            preview: cc.case.preview.clone(),
        }
    }

    pub fn into_case(self, catalog: &HashMap<String, SchemaDescription>) -> Result<CorrectionCase> {
        let schema = match self.schema {
            Some(s) => s,
            None => catalog
                .get(&self.db_id)
                .cloned()
                .ok_or_else(|| Error::UnknownDb(self.db_id.clone()))?,
        };
        let case = Case {
            schema,
            question: self.question,
            generated_sql: self.generated_sql,
            outcome: self.outcome,
            preview: self.preview,
        };
        CorrectionCase::new(case, self.error_types, self.ground_truth_sql, self.reason, self.instruction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FileHeader {
    version: String,
}

/// Checks a JSON header line's `version` field.
pub(crate) fn check_version(line: Option<&str>, expected: &str) -> Result<serde_json::Value> {
    let line = line.ok_or_else(|| Error::CorruptedRecord {
        line: 1,
        reason: "missing header record".into(),
    })?;
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::CorruptedRecord {
        line: 1,
        reason: e.to_string(),
    })?;
    let found = value
        .get("version")
        .and_then(|v| v.as_str())
        .unwrap_or_default();
    if found != expected {
        return Err(Error::VersionMismatch {
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(value)
}

pub fn parse_correction_file(text: &str) -> Result<Vec<CorrectionRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    check_version(lines.next().map(|(_, l)| l), KB_VERSION)?;
    lines
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptedRecord {
                line: n + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Parses and validates every record, resolving schemas from `catalog`.
pub fn read_correction_cases(
    text: &str,
    catalog: &HashMap<String, SchemaDescription>,
) -> Result<Vec<CorrectionCase>> {
    parse_correction_file(text)?
        .into_iter()
        .map(|r| r.into_case(catalog))
        .collect()
}

pub fn write_correction_file(cases: &[CorrectionCase], inline_schema: bool) -> String {
    let header = FileHeader {
        version: KB_VERSION.into(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for cc in cases {
        out.push_str(&serde_json::to_string(&CorrectionRecord::from_case(cc, inline_schema)).expect("record serializes"));
        out.push('\n');
    }
    out
}
