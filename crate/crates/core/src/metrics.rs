//! Execution accuracy, correction accuracy, hit rate and token cost.
//!
//! All arithmetic is done on integers; the only rounding happens when a
//! ratio is turned into basis points or cents (half-up).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kb::KbStore;
use crate::pipeline::CaseResult;

/// Nano-dollars per dollar; prices are stored at this resolution.
const NANOS: u128 = 1_000_000_000;

fn round_div(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

/// A percentage held in hundredths of a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(pub u64);

impl Percent {
    /// `100·num/den`, rounded half-up to two decimals.
    pub fn ratio(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Undefined("ratio with zero denominator"));
        }
        Ok(Percent(round_div(10_000 * num as u128, den as u128) as u64))
    }

    pub fn basis_points(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}%", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(Percent((v * 100.0).round() as u64))
    }
}

/// A dollar amount in cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cents(pub u64);

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Cents {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0 as f64 / 100.0)
    }
}

impl<'de> Deserialize<'de> for Cents {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(Cents((v * 100.0).round() as u64))
    }
}

pub fn execution_accuracy(zero_shot_successes: u64, fixed_cases: u64, total_cases: u64) -> Result<Percent> {
    if zero_shot_successes + fixed_cases > total_cases {
        return Err(Error::invalid("execution accuracy", "more successes than cases"));
    }
    Percent::ratio(zero_shot_successes + fixed_cases, total_cases)
}

pub fn correction_accuracy(fixed_cases: u64, error_cases: u64) -> Result<Percent> {
    if fixed_cases > error_cases {
        return Err(Error::invalid("correction accuracy", "more fixes than error cases"));
    }
    Percent::ratio(fixed_cases, error_cases)
}

pub fn hit_rate(successful_trials: u64, total_trials: u64) -> Result<Percent> {
    if successful_trials > total_trials {
        return Err(Error::invalid("hit rate", "more successes than trials"));
    }
    Percent::ratio(successful_trials, total_trials)
}

/// Per-1k-token prices, held exactly in nano-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelPrice {
    prompt_nanos_per_1k: u64,
    completion_nanos_per_1k: u64,
}

impl ModelPrice {
    pub fn per_1k(prompt: f64, completion: f64) -> Result<Self> {
        let conv = |v: f64, which: &str| {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid("pricing", format!("{which} price must be a non-negative number")));
            }
            Ok((v * NANOS as f64).round() as u64)
        };
        Ok(Self {
            prompt_nanos_per_1k: conv(prompt, "prompt")?,
            completion_nanos_per_1k: conv(completion, "completion")?,
        })
    }

    pub fn prompt_per_1k(&self) -> f64 {
        self.prompt_nanos_per_1k as f64 / NANOS as f64
    }

    pub fn completion_per_1k(&self) -> f64 {
        self.completion_nanos_per_1k as f64 / NANOS as f64
    }
}

#[derive(Serialize, Deserialize)]
struct PriceRepr {
    prompt_per_1k: f64,
    completion_per_1k: f64,
}

impl Serialize for ModelPrice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PriceRepr {
            prompt_per_1k: self.prompt_per_1k(),
            completion_per_1k: self.completion_per_1k(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelPrice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PriceRepr::deserialize(d)?;
        ModelPrice::per_1k(r.prompt_per_1k, r.completion_per_1k).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PricingTable {
    pub fn with(mut self, model: impl Into<String>, price: ModelPrice) -> Self {
        self.models.insert(model.into(), price);
        self
    }

    pub fn get(&self, model: &str) -> Result<ModelPrice> {
        self.models
            .get(model)
            .copied()
            .ok_or_else(|| Error::UnknownModel(model.to_string()))
    }
}

/// Token cost rounded to cents.
pub fn total_cost(prompt_tokens: u64, completion_tokens: u64, price: ModelPrice) -> Cents {
    let nanos_x1000 = prompt_tokens as u128 * price.prompt_nanos_per_1k as u128
        + completion_tokens as u128 * price.completion_nanos_per_1k as u128;
    Cents(round_div(nanos_x1000, 1000 * NANOS / 100) as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    /// Evaluated items: those with a zero-shot outcome and a working truth.
    pub total_cases: u64,
    pub zero_shot_successes: u64,
    pub error_cases: u64,
    pub fixed_cases: u64,
    pub total_trials: u64,
    pub successful_trials: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_cost: Cents,
    /// `None` when the denominator is zero.
    pub execution_accuracy: Option<Percent>,
    pub correction_accuracy: Option<Percent>,
    pub hit_rate: Option<Percent>,
    /// Items whose ground truth failed to execute.
    pub excluded_cases: u64,
    /// Items that hit a backend or data error (counted in `total_cases` only
    /// when a zero-shot outcome exists).
    pub errored_cases: u64,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("run report", r.to_string()));
        if self.error_cases != self.total_cases - self.zero_shot_successes.min(self.total_cases) {
            return bad("error_cases must equal total_cases - zero_shot_successes");
        }
        if self.fixed_cases > self.error_cases {
            return bad("fixed_cases exceeds error_cases");
        }
        if self.successful_trials != self.fixed_cases {
            return bad("successful_trials must equal fixed_cases");
        }
        Ok(())
    }

    pub fn undefined_metrics(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.execution_accuracy.is_none() {
            out.push("execution_accuracy");
        }
        if self.correction_accuracy.is_none() {
            out.push("correction_accuracy");
        }
        if self.hit_rate.is_none() {
            out.push("hit_rate");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("run report", e))
    }

    /// Aligned summary table: header, rule and one row of values.
    pub fn to_text(&self) -> String {
        let pct = |p: Option<Percent>| p.map_or_else(|| "n/a".to_string(), |p| p.to_string());
        let cells = [
            ("Model", self.model.clone()),
            ("Cases", self.total_cases.to_string()),
            ("Zero-shot OK", self.zero_shot_successes.to_string()),
            ("Errors", self.error_cases.to_string()),
            ("Fixed", self.fixed_cases.to_string()),
            ("Exec Acc", pct(self.execution_accuracy)),
            ("Corr Acc", pct(self.correction_accuracy)),
            ("Hit Rate", pct(self.hit_rate)),
            ("Trials", self.total_trials.to_string()),
            ("Prompt Tokens", self.prompt_tokens.to_string()),
            ("Completion Tokens", self.completion_tokens.to_string()),
            ("Total Cost($)", format!("{:.2}", self.total_cost.0 as f64 / 100.0)),
        ];
        let widths: Vec<usize> = cells.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |f: &dyn Fn(&(&str, String)) -> String| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{:<w$}", f(c), w = *w))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        out.push_str(&row(&|(h, _)| h.to_string()));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        out.push_str(&row(&|(_, v)| v.clone()));
        out.push('\n');
        if self.excluded_cases > 0 || self.errored_cases > 0 {
            out.push_str(&format!(
                "excluded (ground truth failed): {}; errored: {}\n",
                self.excluded_cases, self.errored_cases
            ));
        }
        out
    }
}

/// Aggregates one run's results. Token totals cover every result, including
/// excluded and errored ones.
pub fn build_report(results: &[CaseResult], pricing: &PricingTable, model: &str) -> Result<RunReport> {
    let price = pricing.get(model)?;
    let mut r = RunReport {
        model: model.to_string(),
        total_cases: 0,
        zero_shot_successes: 0,
        error_cases: 0,
        fixed_cases: 0,
        total_trials: 0,
        successful_trials: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        total_cost: Cents(0),
        execution_accuracy: None,
        correction_accuracy: None,
        hit_rate: None,
        excluded_cases: 0,
        errored_cases: 0,
    };
    for c in results {
        let usage = c.total_usage();
        r.prompt_tokens += usage.prompt_tokens;
        r.completion_tokens += usage.completion_tokens;
        if c.excluded {
            r.excluded_cases += 1;
            continue;
        }
        if c.error.is_some() {
            r.errored_cases += 1;
        }
        if c.zero_shot_outcome.is_none() {
            continue;
        }
        r.total_cases += 1;
        if c.zero_shot_success() {
            r.zero_shot_successes += 1;
            continue;
        }
        r.error_cases += 1;
        r.total_trials += c.trials.len() as u64;
        r.successful_trials += c.trials.iter().filter(|t| t.outcome.is_success()).count() as u64;
        if c.fixed() {
            r.fixed_cases += 1;
        }
    }
    r.total_cost = total_cost(r.prompt_tokens, r.completion_tokens, price);
    r.execution_accuracy = execution_accuracy(r.zero_shot_successes, r.fixed_cases, r.total_cases).ok();
    r.correction_accuracy = correction_accuracy(r.fixed_cases, r.error_cases).ok();
    r.hit_rate = hit_rate(r.successful_trials, r.total_trials).ok();
    r.validate()?;
    Ok(r)
}

/// One JSON line per KB entry: id, label (the most severe error type) and
/// the full vector.
pub fn embeddings_jsonl(kb: &KbStore) -> String {
    let mut out = String::new();
    for e in kb.entries() {
        let line = serde_json::json!({
            "id": e.id,
            "label": e.correction_case.primary_label().to_string(),
            "vector": e.vector.as_slice(),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

pub fn export_embeddings(kb: &KbStore, path: &Path) -> Result<usize> {
    fs::write(path, embeddings_jsonl(kb)).map_err(|e| Error::io(path, e))?;
    Ok(kb.len())
}
