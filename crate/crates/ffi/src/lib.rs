//! C ABI over the `ecpt` core: knowledge-base search, projection heads,
//! outcome classification, metric arithmetic and reply parsing.
//!
//! Every fallible function returns an [`EcptStatus`]; on failure the
//! message is available from [`ecpt_last_error`] on the same thread until
//! the next failing call. Handles are opaque and must be released with the
//! matching `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ecpt::case::{ErrorId, OutcomeKind};
use ecpt::embedding::{triplet_loss, EmbeddingVector, ProjectionModel};
use ecpt::kb::KbStore;
use ecpt::llm::parse_diagnosis;
use ecpt::metrics::{correction_accuracy, execution_accuracy, hit_rate, total_cost, ModelPrice, Percent};
use ecpt::sqlrun::{classify_outcome, ComparisonPolicy, RunnerConfig, SqlRunner};
use ecpt::sqltext::detect_order_by;
use ecpt::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    Io = 4,
    Parse = 5,
    DimensionMismatch = 6,
    ModelMismatch = 7,
    Sql = 8,
    Undefined = 9,
    BufferTooSmall = 10,
    Panic = 11,
    Other = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcptOutcome {
    Success = 0,
    ExecutionError = 1,
    EmptyTable = 2,
    UndesiredResult = 3,
}

impl From<OutcomeKind> for EcptOutcome {
    fn from(k: OutcomeKind) -> Self {
        match k {
            OutcomeKind::Success => EcptOutcome::Success,
            OutcomeKind::ExecutionError => EcptOutcome::ExecutionError,
            OutcomeKind::EmptyTable => EcptOutcome::EmptyTable,
            OutcomeKind::UndesiredResult => EcptOutcome::UndesiredResult,
        }
    }
}

/// Loaded knowledge-base store.
pub struct EcptKb(KbStore);

/// Projection head (identity or fine-tuned).
pub struct EcptProjection(ProjectionModel);

/// Read-only SQLite runner keyed by database id.
pub struct EcptRunner(SqlRunner);

/// Number of error types; bits above this in a filter mask are rejected.
const ERROR_TYPES: u32 = 13;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EcptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Invalid { .. } | Error::TooFewLabels(_) | Error::Config(_) | Error::UnknownModel(_) => {
                EcptStatus::InvalidArgument
            }
            Error::Io { .. } | Error::MissingFile(_) => EcptStatus::Io,
            Error::MalformedSection { .. }
            | Error::Json { .. }
            | Error::CorruptedRecord { .. }
            | Error::VersionMismatch { .. }
            | Error::DanglingColumnIndex { .. }
            | Error::UnparseableDiagnosis(_)
            | Error::UnparseablePrescription
            | Error::NoSql => EcptStatus::Parse,
            Error::DimensionMismatch { .. } => EcptStatus::DimensionMismatch,
            Error::ModelMismatch { .. } => EcptStatus::ModelMismatch,
            Error::Exec(_) | Error::UnknownDb(_) => EcptStatus::Sql,
            Error::Undefined(_) => EcptStatus::Undefined,
            _ => EcptStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: EcptStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EcptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcptStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EcptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(EcptStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EcptStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(fail(EcptStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(EcptStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(EcptStatus::NullPointer, format!("{what} is null")))
}

/// Message for the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ecpt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- knowledge base ------------------------------------------------------

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_kb_load(path: *const c_char, out: *mut *mut EcptKb) -> EcptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let kb = KbStore::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(EcptKb(kb)));
        Ok(())
    })
}

/// # Safety
/// `kb` must come from [`ecpt_kb_load`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ecpt_kb_free(kb: *mut EcptKb) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

/// # Safety
/// `kb` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_kb_len(kb: *const EcptKb, out: *mut usize) -> EcptStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(kb, "kb")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `kb` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_kb_dimension(kb: *const EcptKb, out: *mut usize) -> EcptStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(kb, "kb")?.0.dimension();
        Ok(())
    })
}

/// Top-`k` search with an already projected query (normalized here).
/// `filter_mask` selects error types by bit: bit `i` is error id `e{i+1}`;
/// zero disables filtering. Writes up to `k` ids and scores, best first,
/// and the number written to `out_count`.
///
/// # Safety
/// `query` must hold `dim` values; `out_ids` and `out_scores` must hold `k`.
#[no_mangle]
pub unsafe extern "C" fn ecpt_kb_search(
    kb: *const EcptKb,
    query: *const f64,
    dim: usize,
    k: usize,
    filter_mask: u32,
    out_ids: *mut u64,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> EcptStatus {
    guard(|| {
        let kb = &handle(kb, "kb")?.0;
        let count = out_arg(out_count, "out_count")?;
        *count = 0;
        if out_ids.is_null() || out_scores.is_null() {
            return Err(fail(EcptStatus::NullPointer, "output buffer is null"));
        }
        if filter_mask >> ERROR_TYPES != 0 {
            return Err(fail(EcptStatus::InvalidArgument, "filter mask has bits beyond e13"));
        }
        let query = EmbeddingVector::normalized(slice_arg(query, dim, "query")?.to_vec())?;
        let filter: Option<HashSet<ErrorId>> = (filter_mask != 0).then(|| {
            (0..ERROR_TYPES as usize)
                .filter(|i| filter_mask & (1 << i) != 0)
                .filter_map(ErrorId::from_label_index)
                .collect()
        });
        let hits = kb.search(&query, k, filter.as_ref())?;
        for (i, (entry, score)) in hits.iter().enumerate() {
            *out_ids.add(i) = entry.id;
            *out_scores.add(i) = *score;
        }
        *count = hits.len();
        Ok(())
    })
}

// ---- projection ----------------------------------------------------------

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_projection_identity(dim: usize, out: *mut *mut EcptProjection) -> EcptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if dim == 0 {
            return Err(fail(EcptStatus::InvalidArgument, "dimension must be positive"));
        }
        *out = Box::into_raw(Box::new(EcptProjection(ProjectionModel::identity(dim))));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_projection_load(path: *const c_char, out: *mut *mut EcptProjection) -> EcptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = ProjectionModel::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(EcptProjection(model)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from a projection constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecpt_projection_free(p: *mut EcptProjection) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_projection_dimension(p: *const EcptProjection, out: *mut usize) -> EcptStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(p, "projection")?.0.dim();
        Ok(())
    })
}

/// Writes 1 when the projection has been trained, 0 for the identity.
///
/// # Safety
/// `p` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_projection_trained(p: *const EcptProjection, out: *mut i32) -> EcptStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(p, "projection")?.0.trained() as i32;
        Ok(())
    })
}

/// `normalize(W · input)` into `output`.
///
/// # Safety
/// `input` and `output` must each hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn ecpt_projection_apply(
    p: *const EcptProjection,
    input: *const f64,
    dim: usize,
    output: *mut f64,
) -> EcptStatus {
    guard(|| {
        let model = &handle(p, "projection")?.0;
        if output.is_null() {
            return Err(fail(EcptStatus::NullPointer, "output is null"));
        }
        let x = EmbeddingVector::normalized(slice_arg(input, dim, "input")?.to_vec())?;
        let y = model.project(&x)?;
        ptr::copy_nonoverlapping(y.as_slice().as_ptr(), output, dim);
        Ok(())
    })
}

// ---- SQL runner ----------------------------------------------------------

/// Zero `timeout_ms` or `row_cap` selects the default.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_runner_new(timeout_ms: u64, row_cap: usize, out: *mut *mut EcptRunner) -> EcptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut config = RunnerConfig::default();
        if timeout_ms > 0 {
            config.timeout_ms = timeout_ms;
        }
        if row_cap > 0 {
            config.row_cap = row_cap;
        }
        *out = Box::into_raw(Box::new(EcptRunner(SqlRunner::new(config))));
        Ok(())
    })
}

/// # Safety
/// `runner` must come from [`ecpt_runner_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecpt_runner_free(runner: *mut EcptRunner) {
    if !runner.is_null() {
        drop(Box::from_raw(runner));
    }
}

/// # Safety
/// `runner` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ecpt_runner_register(
    runner: *mut EcptRunner,
    db_id: *const c_char,
    path: *const c_char,
) -> EcptStatus {
    guard(|| {
        let runner = runner
            .as_mut()
            .ok_or_else(|| fail(EcptStatus::NullPointer, "runner is null"))?;
        runner.0.register(str_arg(db_id, "db_id")?, str_arg(path, "path")?);
        Ok(())
    })
}

/// Runs both queries and classifies the generated one against the truth.
/// Fails with `Sql` when the ground-truth query itself does not run.
///
/// # Safety
/// `runner` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ecpt_runner_classify(
    runner: *const EcptRunner,
    db_id: *const c_char,
    generated_sql: *const c_char,
    truth_sql: *const c_char,
    out: *mut EcptOutcome,
) -> EcptStatus {
    guard(|| {
        let runner = &handle(runner, "runner")?.0;
        let out = out_arg(out, "out")?;
        let db = str_arg(db_id, "db_id")?;
        let truth_sql = str_arg(truth_sql, "truth_sql")?;
        let truth = runner.execute(db, truth_sql).map_err(Error::from)?;
        let generated = runner.execute(db, str_arg(generated_sql, "generated_sql")?);
        *out = classify_outcome(&generated, &truth, &ComparisonPolicy::for_truth(truth_sql))
            .kind
            .into();
        Ok(())
    })
}

// ---- text helpers --------------------------------------------------------

/// Writes 1 when the query has a top-level ORDER BY, else 0.
///
/// # Safety
/// `sql` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_detect_order_by(sql: *const c_char, out: *mut i32) -> EcptStatus {
    guard(|| {
        *out_arg(out, "out")? = detect_order_by(str_arg(sql, "sql")?) as i32;
        Ok(())
    })
}

/// Parses a diagnosis reply into error ids, most likely first, written as
/// 1-based numbers (`e3` → 3). `out_count` receives the total found; fails
/// with `BufferTooSmall` if that exceeds `capacity`.
///
/// # Safety
/// `text` must be NUL-terminated; `out_ids` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn ecpt_parse_diagnosis(
    text: *const c_char,
    out_ids: *mut u8,
    capacity: usize,
    out_count: *mut usize,
) -> EcptStatus {
    guard(|| {
        let count = out_arg(out_count, "out_count")?;
        *count = 0;
        let diagnosis = parse_diagnosis(str_arg(text, "text")?)?;
        let ids = diagnosis.ids();
        *count = ids.len();
        if ids.len() > capacity {
            return Err(fail(EcptStatus::BufferTooSmall, format!("{} ids found", ids.len())));
        }
        if out_ids.is_null() {
            return Err(fail(EcptStatus::NullPointer, "out_ids is null"));
        }
        for (i, id) in ids.iter().enumerate() {
            *out_ids.add(i) = id.label_index() as u8 + 1;
        }
        Ok(())
    })
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)` on the vectors as given.
///
/// # Safety
/// Each vector must hold `dim` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecpt_triplet_loss(
    anchor: *const f64,
    positive: *const f64,
    negative: *const f64,
    dim: usize,
    margin: f64,
    out: *mut f64,
) -> EcptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if !margin.is_finite() || margin < 0.0 {
            return Err(fail(EcptStatus::InvalidArgument, "margin must be finite and non-negative"));
        }
        let v = |p, what| -> Result<EmbeddingVector, Failure> {
            Ok(EmbeddingVector::from_unit(slice_arg(p, dim, what)?.to_vec())?)
        };
        *out = triplet_loss(&v(anchor, "anchor")?, &v(positive, "positive")?, &v(negative, "negative")?, margin)?;
        Ok(())
    })
}

// ---- metrics -------------------------------------------------------------

unsafe fn percent_out(out: *mut u64, p: ecpt::Result<Percent>) -> Result<(), Failure> {
    let out = out_arg(out, "out")?;
    *out = p?.basis_points();
    Ok(())
}

/// `(zero_shot + fixed) / total` in basis points (8808 = 88.08%).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_execution_accuracy(zero_shot: u64, fixed: u64, total: u64, out: *mut u64) -> EcptStatus {
    guard(|| percent_out(out, execution_accuracy(zero_shot, fixed, total)))
}

/// `fixed / error_cases` in basis points.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_correction_accuracy(fixed: u64, error_cases: u64, out: *mut u64) -> EcptStatus {
    guard(|| percent_out(out, correction_accuracy(fixed, error_cases)))
}

/// `successful_trials / total_trials` in basis points.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_hit_rate(successful_trials: u64, total_trials: u64, out: *mut u64) -> EcptStatus {
    guard(|| percent_out(out, hit_rate(successful_trials, total_trials)))
}

/// Total cost in cents for the given token counts and per-1k prices.
///
/// # Safety
/// `out_cents` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecpt_total_cost_cents(
    prompt_tokens: u64,
    completion_tokens: u64,
    prompt_per_1k: f64,
    completion_per_1k: f64,
    out_cents: *mut u64,
) -> EcptStatus {
    guard(|| {
        let out = out_arg(out_cents, "out_cents")?;
        let price = ModelPrice::per_1k(prompt_per_1k, completion_per_1k)?;
        *out = total_cost(prompt_tokens, completion_tokens, price).0;
        Ok(())
    })
}
