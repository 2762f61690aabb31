//! Prompt templates, response parsers and chat-completion backends.

mod client;
mod mock;
mod parse;
mod prompts;

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use client::{ChatBackend, LlmGateway, OpenAiBackend};
pub use mock::{MockBackend, MockResponse, MockRule, MockScript};
pub use parse::{parse_diagnosis, parse_prescription, parse_sql};
pub use prompts::{
    approx_tokens, render_diagnosis, render_generic, render_prescription, render_treatment, render_zero_shot,
    OptionBExamples, PROMPT_TOKEN_BUDGET,
};

use crate::case::ErrorId;
use crate::error::{Error, Result};

/// The LLM calls made by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    ZeroShot,
    Diagnosis,
    Prescription,
    Treatment,
    Generic,
}

impl Step {
    pub const ALL: [Step; 5] = [Step::ZeroShot, Step::Diagnosis, Step::Prescription, Step::Treatment, Step::Generic];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::ZeroShot => "zero_shot",
            Step::Diagnosis => "diagnosis",
            Step::Prescription => "prescription",
            Step::Treatment => "treatment",
            Step::Generic => "generic",
        }
    }

    /// First line of every prompt rendered for this step.
    pub fn marker(self) -> &'static str {
        match self {
            Step::ZeroShot => "### Task: NL-to-SQL",
            Step::Diagnosis => "### Task: Diagnosis",
            Step::Prescription => "### Task: Prescription",
            Step::Treatment => "### Task: Treatment",
            Step::Generic => "### Task: Self-correction",
        }
    }

    /// Recognizes a prompt's step from its first line.
    pub fn of_prompt(prompt: &str) -> Option<Step> {
        let first = prompt.lines().next()?;
        Step::ALL.into_iter().find(|s| s.marker() == first)
    }

    pub fn default_max_tokens(self) -> u32 {
        match self {
            Step::ZeroShot => 350,
            Step::Diagnosis => 100,
            Step::Prescription => 1024,
            Step::Treatment | Step::Generic => 600,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Step::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid("step", s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub prompt: String,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::invalid("request", "temperature must be non-negative"));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("request", "max_tokens must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl LlmResponse {
    pub fn usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, o: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + o.prompt_tokens,
            completion_tokens: self.completion_tokens + o.completion_tokens,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, o: Usage) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

/// Error types named by the diagnosis step, most severe first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    ranked_error_ids: Vec<ErrorId>,
}

impl Diagnosis {
    pub fn new(ids: Vec<ErrorId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("diagnosis", "no error ids"));
        }
        if ids.iter().any(|i| i.is_success()) {
            return Err(Error::invalid("diagnosis", "`success` is not a diagnosis"));
        }
        let mut seen = std::collections::HashSet::new();
        if !ids.iter().all(|i| seen.insert(*i)) {
            return Err(Error::invalid("diagnosis", "duplicate error ids"));
        }
        Ok(Self { ranked_error_ids: ids })
    }

    pub fn ids(&self) -> &[ErrorId] {
        &self.ranked_error_ids
    }

    pub fn top(&self) -> ErrorId {
        self.ranked_error_ids[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prescription {
    pub reason: String,
    pub instruction: String,
}

/// Per-step sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub model_name: String,
    pub temperature: f64,
    pub zero_shot_max_tokens: u32,
    pub diagnosis_max_tokens: u32,
    pub prescription_max_tokens: u32,
    pub treatment_max_tokens: u32,
    pub generic_max_tokens: u32,
    /// In-flight request limit.
    pub concurrency: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-4-turbo".into(),
            temperature: 0.01,
            zero_shot_max_tokens: Step::ZeroShot.default_max_tokens(),
            diagnosis_max_tokens: Step::Diagnosis.default_max_tokens(),
            prescription_max_tokens: Step::Prescription.default_max_tokens(),
            treatment_max_tokens: Step::Treatment.default_max_tokens(),
            generic_max_tokens: Step::Generic.default_max_tokens(),
            concurrency: 4,
        }
    }
}

impl GatewayConfig {
    pub fn params(&self, step: Step) -> StepParams {
        let max_tokens = match step {
            Step::ZeroShot => self.zero_shot_max_tokens,
            Step::Diagnosis => self.diagnosis_max_tokens,
            Step::Prescription => self.prescription_max_tokens,
            Step::Treatment => self.treatment_max_tokens,
            Step::Generic => self.generic_max_tokens,
        };
        StepParams {
            temperature: self.temperature,
            max_tokens,
        }
    }
}
