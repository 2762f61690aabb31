use std::sync::OnceLock;

use regex::Regex;

use super::{Diagnosis, Prescription};
use crate::case::ErrorId;
use crate::error::{Error, Result};
use crate::sqltext::statement_end;

fn id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\be([0-9]{1,2})\b").expect("valid regex"))
}

/// Error ids `e1`..`e13` in order of first appearance, deduplicated.
pub fn parse_diagnosis(text: &str) -> Result<Diagnosis> {
    let mut ids: Vec<ErrorId> = Vec::new();
    for cap in id_pattern().captures_iter(text) {
        let id = cap[1].parse::<u8>().ok().and_then(ErrorId::error);
        if let Some(id) = id.filter(|id| !ids.contains(id)) {
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::UnparseableDiagnosis(crate::case::elide(text, 120)));
    }
    Diagnosis::new(ids)
}

fn marker_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[\s#*>-]*(reason|instruction)s?\s*\**\s*:\s*\**").expect("valid regex")
    })
}

/// Splits on `REASON:` / `INSTRUCTION:` markers; without markers the first
/// paragraph is the reason and the rest the instruction.
pub fn parse_prescription(text: &str) -> Result<Prescription> {
    let text = text.trim();
    let marks: Vec<(String, usize, usize)> = marker_pattern()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            (c[1].to_lowercase(), m.start(), m.end())
        })
        .collect();
    let (reason, instruction) = if marks.iter().any(|(k, _, _)| k == "instruction") {
        let mut reason = String::new();
        let mut instruction = String::new();
        for (i, (kind, _, end)) in marks.iter().enumerate() {
            let stop = marks.get(i + 1).map_or(text.len(), |m| m.1);
            let body = text[*end..stop].trim();
            let slot = if kind == "reason" { &mut reason } else { &mut instruction };
            if slot.is_empty() {
                *slot = body.to_string();
            }
        }
        (reason, instruction)
    } else {
        match text.split_once("\n\n") {
            Some((first, rest)) => (first.trim().to_string(), rest.trim().to_string()),
            None => (String::new(), text.to_string()),
        }
    };
    if instruction.is_empty() {
        return Err(Error::UnparseablePrescription);
    }
    Ok(Prescription { reason, instruction })
}

fn keyword_pattern(case_insensitive: bool) -> &'static Regex {
    static CI: OnceLock<Regex> = OnceLock::new();
    static CS: OnceLock<Regex> = OnceLock::new();
    if case_insensitive {
        CI.get_or_init(|| Regex::new(r"(?im)^[ \t]*(SELECT|WITH|INSERT|UPDATE|DELETE)\b").expect("valid regex"))
    } else {
        CS.get_or_init(|| Regex::new(r"\b(SELECT|WITH|INSERT|UPDATE|DELETE)\b").expect("valid regex"))
    }
}

fn fenced_body(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    Some(body.find("```").map_or(body, |end| &body[..end]))
}

/// Extracts the first SQL statement from a completion: code fences and
/// surrounding prose are dropped. A keyword at the start of a line is
/// preferred; otherwise the first upper-case keyword anywhere is used.
pub fn parse_sql(text: &str) -> Result<String> {
    let source = fenced_body(text).unwrap_or(text);
    let start = keyword_pattern(true)
        .captures(source)
        .and_then(|c| c.get(1))
        .or_else(|| keyword_pattern(false).find(source))
        .map(|m| m.start())
        .ok_or(Error::NoSql)?;
    let end = statement_end(source, start)
        .or_else(|| source[start..].find("\n\n").map(|i| start + i))
        .unwrap_or(source.len());
    let sql = source[start..end].trim();
    if sql.is_empty() {
        return Err(Error::NoSql);
    }
    Ok(sql.to_string())
}
