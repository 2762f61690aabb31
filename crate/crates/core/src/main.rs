use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use ecpt::case::{serialize_case, CorrectionCase, SchemaDescription};
use ecpt::casefile::read_correction_cases;
use ecpt::config::RunConfig;
use ecpt::embedding::{precision_at_1, train, BaseEmbedder, ProjectionModel};
use ecpt::kb::KbStore;
use ecpt::llm::{ChatBackend, LlmGateway, MockBackend, MockScript};
use ecpt::metrics::{build_report, export_embeddings, RunReport};
use ecpt::pipeline::{read_results, write_results, CorrectionMode, Pipeline, RunControl};
use ecpt::spider::{load_schemas, validate_ground_truth, Dataset, ExclusionList};
use ecpt::Error;

#[derive(Parser)]
#[command(name = "ecpt", version, about = "Diagnose, prescribe and treat errors in LLM-generated SQL")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and sampling (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Items processed concurrently (default 1).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Answer every LLM call from this JSON script instead of a live backend.
    #[arg(long, global = true, value_name = "SCRIPT")]
    mock_backend: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a Spider-format dataset and print counts.
    Ingest(DatasetArgs),
    /// Embed a correction-case file into a knowledge-base store.
    BuildKb(BuildKbArgs),
    /// Train the projection head on labeled correction cases.
    TrainEmbeddings(TrainArgs),
    /// Run zero-shot generation and correction over a dataset.
    Run(RunArgs),
    /// Recompute the report from a results file.
    Report(ReportArgs),
    /// Write one labeled vector per knowledge-base entry.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Clone, Default)]
struct DatasetArgs {
    /// Directory holding tables.json and database/<db_id>/<db_id>.sqlite.
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Question file; relative paths resolve against the dataset root.
    #[arg(long)]
    questions: Option<PathBuf>,
    /// File of `db_id<TAB>question-hash` lines to skip.
    #[arg(long)]
    exclusions: Option<PathBuf>,
    /// Restrict to these database ids (repeatable).
    #[arg(long = "subset", value_name = "DB_ID")]
    subset: Vec<String>,
}

#[derive(Args)]
struct BuildKbArgs {
    /// Correction-case file.
    #[arg(long)]
    cases: PathBuf,
    /// Output store file (defaults to paths.kb).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fine-tuned projection file; the identity projection is used without it.
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Dataset root whose tables.json resolves schemas not stored inline.
    #[arg(long)]
    dataset_root: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled correction-case file.
    #[arg(long)]
    cases: PathBuf,
    /// Output projection file (defaults to paths.projection).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs (overrides the config).
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset root whose tables.json resolves schemas not stored inline.
    #[arg(long)]
    dataset_root: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Knowledge-base store file.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Fine-tuned projection file; enables option A.
    #[arg(long)]
    projection: Option<PathBuf>,
    /// JSONL checkpoint appended as items finish.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write per-item results as JSONL here.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Structured report output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from the checkpoint instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Run the single-prompt self-correction baseline.
    #[arg(long)]
    generic: bool,
    /// Show one retrieved example per error type in the diagnosis prompt.
    #[arg(long)]
    option_b: bool,
    /// Retrieve across all diagnosed error types instead of the top one.
    #[arg(long)]
    option_c: bool,
    /// Correction trials per failing item (default 3).
    #[arg(long)]
    max_trials: Option<usize>,
    /// Similar cases retrieved per prescription; 0 disables retrieval.
    #[arg(long)]
    retrieval_k: Option<usize>,
    /// Chat model name (overrides the config).
    #[arg(long)]
    model: Option<String>,
    /// Stop after this many pending items (the rest stay in the checkpoint).
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results JSONL written by `run`.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Model whose pricing applies; defaults to the configured model.
    #[arg(long)]
    model: Option<String>,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Knowledge-base store file.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Backend(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_backend() {
            Failure::Backend(e.to_string())
        } else if matches!(e, Error::Config(_) | Error::UnknownModel(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn required(value: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    value.ok_or_else(|| Failure::Usage(format!("no {what} given (flag or config)")))
}

struct Ctx {
    config: RunConfig,
    seed: u64,
    parallelism: usize,
    mock_backend: Option<PathBuf>,
}

impl Ctx {
    fn embedder(&self) -> CliResult<Box<dyn BaseEmbedder>> {
        Ok(self.config.embedding.embedder(&self.config.backend)?)
    }

    fn backend(&self) -> CliResult<Arc<dyn ChatBackend>> {
        Ok(match &self.mock_backend {
            Some(path) => Arc::new(MockBackend::new(MockScript::load(path)?)),
            None => Arc::from(self.config.chat_backend()),
        })
    }

    fn dataset_root(&self, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.config.paths.dataset_root.clone())
    }

    fn load_dataset(&self, args: DatasetArgs) -> CliResult<(Dataset, usize)> {
        let root = required(self.dataset_root(args.dataset_root), "dataset root")?;
        let questions = required(args.questions.or_else(|| self.config.paths.questions.clone()), "question file")?;
        let questions = if questions.is_absolute() || questions.exists() {
            questions
        } else {
            root.join(questions)
        };
        let exclusions = match args.exclusions.or_else(|| self.config.paths.exclusions.clone()) {
            Some(p) => ExclusionList::load(&p)?,
            None => ExclusionList::default(),
        };
        let subset = (!args.subset.is_empty()).then_some(args.subset.as_slice());
        let dataset = Dataset::load(&root, &questions, &exclusions, subset)?;
        Ok((dataset, exclusions.len()))
    }

    fn catalog(&self, root: Option<PathBuf>) -> CliResult<HashMap<String, SchemaDescription>> {
        Ok(match self.dataset_root(root) {
            Some(root) => load_schemas(&root.join("tables.json"))?
                .into_iter()
                .map(|s| (s.db_id.clone(), s))
                .collect(),
            None => HashMap::new(),
        })
    }

    fn correction_cases(&self, path: &Path, root: Option<PathBuf>) -> CliResult<Vec<CorrectionCase>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(read_correction_cases(&text, &self.catalog(root)?)?)
    }
}

fn ingest(ctx: &Ctx, args: DatasetArgs) -> CliResult {
    let (mut dataset, excluded) = ctx.load_dataset(args)?;
    println!("databases: {}", dataset.schemas.len());
    println!("items: {}", dataset.items.len());
    println!("excluded: {excluded}");
    let missing = dataset.missing_databases();
    if !missing.is_empty() {
        println!("missing database files: {}", missing.join(", "));
        return Ok(());
    }
    let runner = dataset.runner(ctx.config.runner);
    let flagged = validate_ground_truth(&mut dataset.items, &runner);
    println!("ground truth failures: {flagged}");
    Ok(())
}

fn build_kb(ctx: &Ctx, args: BuildKbArgs) -> CliResult {
    let out = required(args.out.or_else(|| ctx.config.paths.kb.clone()), "KB output path")?;
    let cases = ctx.correction_cases(&args.cases, args.dataset_root)?;
    let embedder = ctx.embedder()?;
    let model = match &args.projection {
        Some(p) => ProjectionModel::load(p)?,
        None => ProjectionModel::identity(embedder.dimension()),
    };
    let mut kb = KbStore::for_model(&model);
    for cc in cases {
        kb.insert(cc, embedder.as_ref(), &model)?;
    }
    kb.persist(&out)?;
    println!(
        "stored {} cases in {} (dimension {}, model {})",
        kb.len(),
        out.display(),
        kb.dimension(),
        kb.model_hash()
    );
    Ok(())
}

fn train_embeddings(ctx: &Ctx, args: TrainArgs) -> CliResult {
    let out = required(args.out.or_else(|| ctx.config.paths.projection.clone()), "projection output path")?;
    let mut config = ctx.config.training;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let cases = ctx.correction_cases(&args.cases, args.dataset_root)?;
    let labeled: Vec<(String, _)> = cases
        .iter()
        .map(|cc| (serialize_case(&cc.case, true), cc.primary_label()))
        .collect();
    let embedder = ctx.embedder()?;
    let outcome = train(embedder.as_ref(), &labeled, &config, ctx.seed)?;
    let mut previous = f64::INFINITY;
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        let flag = if *loss > previous { "  (increased)" } else { "" };
        println!("epoch {:>3}  loss {loss:.6}{flag}", i + 1);
        previous = *loss;
    }
    let texts: Vec<&str> = labeled.iter().map(|(t, _)| t.as_str()).collect();
    let base = embedder.embed_base_batch(&texts)?;
    let labels: Vec<usize> = labeled.iter().map(|(_, l)| l.label_index()).collect();
    let projected = base
        .iter()
        .map(|v| outcome.model.project(v))
        .collect::<ecpt::Result<Vec<_>>>()?;
    println!(
        "precision@1: identity {:.4} -> trained {:.4}",
        precision_at_1(&base, &labels),
        precision_at_1(&projected, &labels)
    );
    outcome.model.save(&out)?;
    println!("wrote {} (model {})", out.display(), outcome.model.identity_hash());
    Ok(())
}

fn run(ctx: &Ctx, args: RunArgs) -> CliResult {
    let cfg = &ctx.config;
    let mut options = cfg.pipeline;
    if args.generic {
        options.mode = CorrectionMode::Generic;
    }
    options.option_b_examples_in_diagnosis |= args.option_b;
    options.option_c_resolve_all_at_once |= args.option_c;
    if let Some(n) = args.max_trials {
        options.max_trials = n;
    }
    if let Some(k) = args.retrieval_k {
        options.retrieval_k = k;
    }
    options.validate()?;
    let mut gateway_cfg = cfg.gateway.clone();
    if let Some(m) = args.model {
        gateway_cfg.model_name = m;
    }
    let model_name = gateway_cfg.model_name.clone();
    // Fail on unknown pricing before spending any tokens.
    cfg.pricing.get(&model_name)?;

    let (dataset, _) = ctx.load_dataset(args.dataset.clone())?;
    let missing = dataset.missing_databases();
    let needed: Vec<&str> = missing
        .into_iter()
        .filter(|db| dataset.items.iter().any(|i| i.db_id == *db))
        .collect();
    if !needed.is_empty() {
        return Err(Failure::Data(format!("missing database files for: {}", needed.join(", "))));
    }
    let runner = dataset.runner(cfg.runner);
    let embedder = ctx.embedder()?;
    let projection = args.projection.or_else(|| cfg.paths.projection.clone());
    let (kb, model) = if options.mode == CorrectionMode::Generic {
        let model = ProjectionModel::identity(embedder.dimension());
        (KbStore::for_model(&model), model)
    } else {
        let kb = KbStore::load(&required(args.kb.or_else(|| cfg.paths.kb.clone()), "KB file")?)?;
        let model = match &projection {
            Some(p) => ProjectionModel::load(p)?,
            None if options.option_a_finetuned_embeddings => {
                return Err(Failure::Usage("option A needs a projection file".into()))
            }
            None => ProjectionModel::identity(embedder.dimension()),
        };
        options.option_a_finetuned_embeddings = model.trained();
        (kb, model)
    };
    let gateway = LlmGateway::new(ctx.backend()?, gateway_cfg);
    let pipeline = Pipeline::new(
        &gateway,
        &runner,
        &dataset.schemas,
        &kb,
        embedder.as_ref(),
        &model,
        options,
    )?;
    let checkpoint = args.checkpoint.or_else(|| cfg.paths.checkpoint.clone());
    if let Some(cp) = &checkpoint {
        if !args.resume && cp.exists() {
            fs::remove_file(cp).map_err(|e| Error::io(cp, e))?;
        }
    } else if args.resume {
        return Err(Failure::Usage("--resume needs a checkpoint path".into()));
    }
    let control = RunControl {
        parallelism: ctx.parallelism,
        checkpoint,
        stop_after: args.limit,
    };
    let results = pipeline.run_dataset(&dataset.items, &control)?;
    if results.len() < dataset.items.len() {
        println!(
            "stopped after {} of {} items; rerun with --resume to continue",
            results.len(),
            dataset.items.len()
        );
        return Ok(());
    }
    if let Some(p) = args.results.or_else(|| cfg.paths.results.clone()) {
        write_results(&p, &results)?;
    }
    let report = build_report(&results, &cfg.pricing, &model_name)?;
    emit_report(&report, args.report.or_else(|| cfg.paths.report.clone()))?;
    let errored: Vec<_> = results.iter().filter(|r| r.error.is_some() && !r.excluded).collect();
    if let Some(first) = errored.first() {
        return Err(Failure::Backend(format!(
            "{} item(s) stopped with errors (first: {}); rerun with --resume to retry them",
            errored.len(),
            first.error.as_deref().unwrap_or_default()
        )));
    }
    Ok(())
}

fn emit_report(report: &RunReport, json: Option<PathBuf>) -> CliResult {
    print!("{}", report.to_text());
    if let Some(p) = json {
        fs::write(&p, report.to_json() + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn report(ctx: &Ctx, args: ReportArgs) -> CliResult {
    let path = required(args.results.or_else(|| ctx.config.paths.results.clone()), "results file")?;
    let results = read_results(&path)?;
    let model = args.model.unwrap_or_else(|| ctx.config.gateway.model_name.clone());
    let report = build_report(&results, &ctx.config.pricing, &model)?;
    emit_report(&report, args.json)
}

fn export(ctx: &Ctx, args: ExportArgs) -> CliResult {
    let kb = KbStore::load(&required(args.kb.or_else(|| ctx.config.paths.kb.clone()), "KB file")?)?;
    let n = export_embeddings(&kb, &args.out)?;
    println!("exported {n} vectors to {}", args.out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        parallelism: cli.parallelism.or(config.parallelism).unwrap_or(1),
        mock_backend: cli.mock_backend,
        config,
    };
    if ctx.parallelism == 0 {
        return Err(Failure::Usage("--parallelism must be at least 1".into()));
    }
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::BuildKb(a) => build_kb(&ctx, a),
        Command::TrainEmbeddings(a) => train_embeddings(&ctx, a),
        Command::Run(a) => run(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::ExportEmbeddings(a) => export(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
