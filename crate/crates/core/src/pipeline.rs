//! Per-item orchestration: zero-shot generation, outcome classification,
//! then up to `max_trials` rounds of diagnose → prescribe → treat.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::case::{serialize_case, Case, CorrectionCase, ErrorId, ExecutionOutcome, PreviewLimits, SchemaDescription};
use crate::embedding::{embed, BaseEmbedder, EmbeddingVector, ProjectionModel};
use crate::error::{Error, Result};
use crate::kb::KbStore;
use crate::llm::{
    parse_diagnosis, parse_prescription, parse_sql, render_diagnosis, render_generic, render_prescription,
    render_treatment, render_zero_shot, Diagnosis, LlmGateway, OptionBExamples, Step, Usage,
};
use crate::spider::{question_hash, DatasetItem};
use crate::sqlrun::{classify_outcome, ComparisonPolicy, ResultTable, SqlRunner};

/// Detail recorded when a completion holds no SQL.
pub const NO_SQL_DETAIL: &str = "no SQL in completion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    #[default]
    Ecpt,
    /// Single self-correction prompt per trial, no diagnosis or retrieval.
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub option_a_finetuned_embeddings: bool,
    pub option_b_examples_in_diagnosis: bool,
    pub option_c_resolve_all_at_once: bool,
    pub max_trials: usize,
    pub retrieval_k: usize,
    pub mode: CorrectionMode,
    pub preview: PreviewLimits,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            option_a_finetuned_embeddings: false,
            option_b_examples_in_diagnosis: false,
            option_c_resolve_all_at_once: false,
            max_trials: 3,
            retrieval_k: 3,
            mode: CorrectionMode::Ecpt,
            preview: PreviewLimits::default(),
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_trials < 1 {
            return Err(Error::invalid("pipeline options", "max_trials must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemRef {
    pub index: usize,
    pub db_id: String,
    pub question_hash: u64,
}

impl ItemRef {
    pub fn of(item: &DatasetItem) -> Self {
        Self {
            index: item.index,
            db_id: item.db_id.clone(),
            question_hash: question_hash(&item.question),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub item_ref: ItemRef,
    /// 1-based.
    pub trial_index: usize,
    pub diagnosis: Option<Diagnosis>,
    pub retrieved_ids: Vec<u64>,
    pub candidate_sql: String,
    pub outcome: ExecutionOutcome,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Why the trial stopped early (unparseable diagnosis or prescription).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub item_ref: ItemRef,
    /// The ground truth failed to execute; the item is not evaluated.
    #[serde(default)]
    pub excluded: bool,
    pub zero_shot_sql: Option<String>,
    pub zero_shot_outcome: Option<ExecutionOutcome>,
    pub zero_shot_usage: Usage,
    pub final_outcome: Option<ExecutionOutcome>,
    pub trials: Vec<TrialRecord>,
    /// Error that stopped processing of this item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CaseResult {
    fn empty(item_ref: ItemRef) -> Self {
        Self {
            item_ref,
            excluded: false,
            zero_shot_sql: None,
            zero_shot_outcome: None,
            zero_shot_usage: Usage::default(),
            final_outcome: None,
            trials: Vec::new(),
            error: None,
        }
    }

    pub fn zero_shot_success(&self) -> bool {
        self.zero_shot_outcome.as_ref().is_some_and(ExecutionOutcome::is_success)
    }

    /// Failed zero-shot and ended in Success after correction.
    pub fn fixed(&self) -> bool {
        !self.zero_shot_success() && self.final_outcome.as_ref().is_some_and(ExecutionOutcome::is_success)
    }

    pub fn correction_usage(&self) -> Usage {
        self.trials.iter().map(TrialRecord::usage).sum()
    }

    pub fn total_usage(&self) -> Usage {
        self.zero_shot_usage + self.correction_usage()
    }
}

pub struct ZeroShot {
    pub case: Case,
    pub usage: Usage,
}

/// Ground truth executed once per item.
struct Truth {
    table: ResultTable,
    policy: ComparisonPolicy,
}

pub struct Pipeline<'a> {
    pub gateway: &'a LlmGateway,
    pub runner: &'a SqlRunner,
    pub kb: &'a KbStore,
    pub embedder: &'a dyn BaseEmbedder,
    pub model: &'a ProjectionModel,
    pub options: PipelineOptions,
    schemas: HashMap<String, SchemaDescription>,
}

impl<'a> Pipeline<'a> {
    /// Checks that the store was built with `model` and that the model's
    /// training state matches option A.
    pub fn new(
        gateway: &'a LlmGateway,
        runner: &'a SqlRunner,
        schemas: &[SchemaDescription],
        kb: &'a KbStore,
        embedder: &'a dyn BaseEmbedder,
        model: &'a ProjectionModel,
        options: PipelineOptions,
    ) -> Result<Self> {
        options.validate()?;
        if options.mode == CorrectionMode::Ecpt {
            kb.check_model(model)?;
            if options.option_a_finetuned_embeddings != model.trained() {
                return Err(Error::Config(format!(
                    "option A is {} but the projection model is {}",
                    options.option_a_finetuned_embeddings,
                    if model.trained() { "fine-tuned" } else { "the identity" }
                )));
            }
            if embedder.dimension() != kb.dimension() {
                return Err(Error::DimensionMismatch {
                    expected: kb.dimension(),
                    got: embedder.dimension(),
                });
            }
        }
        Ok(Self {
            gateway,
            runner,
            kb,
            embedder,
            model,
            options,
            schemas: schemas.iter().map(|s| (s.db_id.clone(), s.clone())).collect(),
        })
    }

    fn schema(&self, db_id: &str) -> Result<&SchemaDescription> {
        self.schemas.get(db_id).ok_or_else(|| Error::UnknownDb(db_id.to_string()))
    }

    /// Executes `sql` and classifies it against the truth, returning the
    /// case for this attempt.
    fn evaluate(&self, base: &Case, sql: Option<String>, truth: &Truth) -> Case {
        let mut case = base.clone();
        match sql {
            None => {
                case.outcome = ExecutionOutcome::execution_error(NO_SQL_DETAIL);
                case.preview = None;
            }
            Some(sql) => {
                let exec = self.runner.execute(&case.schema.db_id, &sql);
                case.outcome = classify_outcome(&exec, &truth.table, &truth.policy);
                case.preview = exec.ok().map(|t| t.preview(self.options.preview));
                case.generated_sql = sql;
            }
        }
        case
    }

    fn truth(&self, item: &DatasetItem) -> Result<Truth> {
        let table = self.runner.execute(&item.db_id, &item.ground_truth_sql)?;
        Ok(Truth {
            table,
            policy: ComparisonPolicy::for_truth(&item.ground_truth_sql),
        })
    }

    fn zero_shot_with(&self, item: &DatasetItem, truth: &Truth) -> Result<ZeroShot> {
        let schema = self.schema(&item.db_id)?.clone();
        let resp = self.gateway.run_step(Step::ZeroShot, render_zero_shot(&schema, &item.question))?;
        let base = Case {
            schema,
            question: item.question.clone(),
            generated_sql: String::new(),
            outcome: ExecutionOutcome::success(),
            preview: None,
        };
        let case = self.evaluate(&base, parse_sql(&resp.text).ok(), truth);
        Ok(ZeroShot {
            case,
            usage: resp.usage(),
        })
    }

    /// Renders, completes, parses and executes the zero-shot query.
    pub fn run_zero_shot(&self, item: &DatasetItem) -> Result<ZeroShot> {
        let truth = self.truth(item)?;
        self.zero_shot_with(item, &truth)
    }

    fn query_vector(&self, case: &Case) -> Result<EmbeddingVector> {
        embed(self.embedder, &serialize_case(case, true), self.model)
    }

    fn option_b_examples(&self, query: &EmbeddingVector) -> Result<OptionBExamples> {
        let mut out = BTreeMap::new();
        for id in ErrorId::errors() {
            let filter: HashSet<ErrorId> = [id].into_iter().collect();
            if let Some((entry, _)) = self.kb.search(query, 1, Some(&filter))?.into_iter().next() {
                out.insert(id, entry.correction_case.clone());
            }
        }
        Ok(out)
    }

    fn retrieve(&self, query: &EmbeddingVector, diagnosis: &Diagnosis) -> Result<Vec<(u64, &'a CorrectionCase)>> {
        if self.options.retrieval_k == 0 {
            return Ok(Vec::new());
        }
        let filter: HashSet<ErrorId> = if self.options.option_c_resolve_all_at_once {
            diagnosis.ids().iter().copied().collect()
        } else {
            [diagnosis.top()].into_iter().collect()
        };
        Ok(self
            .kb
            .search(query, self.options.retrieval_k, Some(&filter))?
            .into_iter()
            .map(|(e, _)| (e.id, &e.correction_case))
            .collect())
    }

    /// The retrieval filter a diagnosis produces under the current options.
    pub fn retrieval_filter(&self, diagnosis: &Diagnosis) -> Vec<ErrorId> {
        if self.options.option_c_resolve_all_at_once {
            diagnosis.ids().to_vec()
        } else {
            vec![diagnosis.top()]
        }
    }

    fn ecpt_trial(&self, case: &Case, truth: &Truth, record: &mut TrialRecord) -> Result<Option<Case>> {
        let query = self.query_vector(case)?;
        let examples = if self.options.option_b_examples_in_diagnosis {
            Some(self.option_b_examples(&query)?)
        } else {
            None
        };
        let resp = self.gateway.run_step(Step::Diagnosis, render_diagnosis(case, examples.as_ref()))?;
        record.prompt_tokens += resp.prompt_tokens;
        record.completion_tokens += resp.completion_tokens;
        let diagnosis = match parse_diagnosis(&resp.text) {
            Ok(d) => d,
            Err(e) => {
                record.failure = Some(e.to_string());
                return Ok(None);
            }
        };
        let retrieved = self.retrieve(&query, &diagnosis)?;
        record.retrieved_ids = retrieved.iter().map(|(id, _)| *id).collect();
        record.diagnosis = Some(diagnosis.clone());
        let cases: Vec<&CorrectionCase> = retrieved.iter().map(|(_, c)| *c).collect();
        let resp = self
            .gateway
            .run_step(Step::Prescription, render_prescription(case, &diagnosis, &cases))?;
        record.prompt_tokens += resp.prompt_tokens;
        record.completion_tokens += resp.completion_tokens;
        let prescription = match parse_prescription(&resp.text) {
            Ok(p) => p,
            Err(e) => {
                record.failure = Some(e.to_string());
                return Ok(None);
            }
        };
        let resp = self.gateway.run_step(Step::Treatment, render_treatment(case, &prescription))?;
        record.prompt_tokens += resp.prompt_tokens;
        record.completion_tokens += resp.completion_tokens;
        Ok(Some(self.evaluate(case, parse_sql(&resp.text).ok(), truth)))
    }

    fn generic_trial(&self, case: &Case, truth: &Truth, record: &mut TrialRecord) -> Result<Option<Case>> {
        let resp = self.gateway.run_step(Step::Generic, render_generic(case))?;
        record.prompt_tokens += resp.prompt_tokens;
        record.completion_tokens += resp.completion_tokens;
        Ok(Some(self.evaluate(case, parse_sql(&resp.text).ok(), truth)))
    }

    /// Trial loop for a failed case. Appends trials to `result` as they
    /// complete and stops at the first Success.
    fn correct_into(&self, mut case: Case, truth: &Truth, result: &mut CaseResult) -> Result<()> {
        for trial_index in 1..=self.options.max_trials {
            let mut record = TrialRecord {
                item_ref: result.item_ref.clone(),
                trial_index,
                diagnosis: None,
                retrieved_ids: Vec::new(),
                candidate_sql: String::new(),
                outcome: case.outcome.clone(),
                prompt_tokens: 0,
                completion_tokens: 0,
                failure: None,
            };
            let attempt = match self.options.mode {
                CorrectionMode::Ecpt => self.ecpt_trial(&case, truth, &mut record),
                CorrectionMode::Generic => self.generic_trial(&case, truth, &mut record),
            };
            let next = match attempt {
                Ok(next) => next,
                Err(e) => {
                    // Keep the tokens already spent on this trial.
                    record.failure = Some(e.to_string());
                    result.trials.push(record);
                    return Err(e);
                }
            };
            if let Some(next) = next {
                record.outcome = next.outcome.clone();
                record.candidate_sql = if next.outcome.detail == NO_SQL_DETAIL {
                    String::new()
                } else {
                    next.generated_sql.clone()
                };
                if next.outcome.detail != NO_SQL_DETAIL {
                    case = next;
                } else {
                    case.outcome = next.outcome;
                }
            }
            result.final_outcome = Some(record.outcome.clone());
            let done = record.outcome.is_success();
            result.trials.push(record);
            if done {
                break;
            }
        }
        Ok(())
    }

    /// Runs the correction loop on a failed case against `item`'s truth.
    pub fn correct(&self, item: &DatasetItem, case: Case) -> Result<CaseResult> {
        if case.outcome.is_success() {
            return Err(Error::invalid("correction", "case already succeeded"));
        }
        let truth = self.truth(item)?;
        let mut result = CaseResult::empty(ItemRef::of(item));
        result.zero_shot_outcome = Some(case.outcome.clone());
        result.final_outcome = Some(case.outcome.clone());
        self.correct_into(case, &truth, &mut result)?;
        Ok(result)
    }

    /// Full flow for one item. Never fails: problems are recorded on the
    /// result.
    pub fn process(&self, item: &DatasetItem) -> CaseResult {
        let mut result = CaseResult::empty(ItemRef::of(item));
        if let Some(e) = &item.truth_error {
            result.excluded = true;
            result.error = Some(format!("ground truth failed: {e}"));
            return result;
        }
        let truth = match self.truth(item) {
            Ok(t) => t,
            Err(e) => {
                result.excluded = true;
                result.error = Some(format!("ground truth failed: {e}"));
                return result;
            }
        };
        let zs = match self.zero_shot_with(item, &truth) {
            Ok(zs) => zs,
            Err(e) => {
                result.error = Some(e.to_string());
                return result;
            }
        };
        result.zero_shot_usage = zs.usage;
        result.zero_shot_sql = (zs.case.outcome.detail != NO_SQL_DETAIL).then(|| zs.case.generated_sql.clone());
        result.zero_shot_outcome = Some(zs.case.outcome.clone());
        result.final_outcome = Some(zs.case.outcome.clone());
        if !zs.case.outcome.is_success() {
            if let Err(e) = self.correct_into(zs.case, &truth, &mut result) {
                result.error = Some(e.to_string());
            }
        }
        result
    }

    /// Processes `items` with up to `control.parallelism` workers. Results
    /// come back in input order. With a checkpoint, finished items are
    /// appended to it and skipped on the next run.
    pub fn run_dataset(&self, items: &[DatasetItem], control: &RunControl) -> Result<Vec<CaseResult>> {
        let mut done: HashMap<ItemRef, CaseResult> = match &control.checkpoint {
            Some(p) if p.exists() => read_results(p)?.into_iter().map(|r| (r.item_ref.clone(), r)).collect(),
            _ => HashMap::new(),
        };
        let mut slots: Vec<Option<CaseResult>> = items.iter().map(|i| done.remove(&ItemRef::of(i))).collect();
        let mut pending: Vec<usize> = (0..items.len()).filter(|&i| slots[i].is_none()).collect();
        if let Some(limit) = control.stop_after {
            pending.truncate(limit);
        }
        let writer = match &control.checkpoint {
            Some(p) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        let next = AtomicUsize::new(0);
        let finished: Mutex<Vec<(usize, CaseResult)>> = Mutex::new(Vec::new());
        let write_error: Mutex<Option<Error>> = Mutex::new(None);
        let workers = control.parallelism.max(1).min(pending.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&idx) = pending.get(n) else { break };
                    let result = self.process(&items[idx]);
                    // Errored items stay pending so a resumed run retries them.
                    let keep = result.error.is_none() || result.excluded;
                    if let Some(w) = writer.as_ref().filter(|_| keep) {
                        let line = serde_json::to_string(&result).expect("result serializes");
                        let mut f = w.lock().expect("checkpoint lock");
                        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                            let path = control.checkpoint.clone().unwrap_or_default();
                            write_error.lock().expect("error lock").get_or_insert(Error::io(path, e));
                        }
                    }
                    finished.lock().expect("results lock").push((idx, result));
                });
            }
        });
        if let Some(e) = write_error.into_inner().expect("error lock") {
            return Err(e);
        }
        for (idx, r) in finished.into_inner().expect("results lock") {
            slots[idx] = Some(r);
        }
        Ok(slots.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub parallelism: usize,
    pub checkpoint: Option<PathBuf>,
    /// Process at most this many pending items, then return (the rest stay
    /// pending in the checkpoint).
    pub stop_after: Option<usize>,
}

/// Line-delimited CaseResult records.
pub fn write_results(path: &Path, results: &[CaseResult]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let line = serde_json::to_string(r).expect("result serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<CaseResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptedRecord {
                line: n + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
