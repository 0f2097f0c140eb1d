use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Args;

use soliloquy_core::dataset::{
    canonical_order, enrich_solution, export_finetune, export_transcripts, generate_corpus, import_transcripts,
    load_questions, plan_schedule, save_questions, EnrichOptions, FinetuneOptions, GenerationOptions, ScheduleSpec,
    TranscriptSink,
};
use soliloquy_core::evaluation::{
    aggregate, apply_labels, build_cases, judge_case, judgments_from_labels, load_cases, load_labels, run_case,
    save_cases, AnswerPair, CaseJudgment, EvalError, LabelRecord,
};
use soliloquy_core::orchestrator::{Clock, StudentPolicy};
use soliloquy_core::{Conversation, ConversationStatus};

use crate::Settings;

#[derive(Args)]
pub struct EnrichArgs {
    #[arg(long)]
    questions: PathBuf,
    /// Output corpus; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-enrich records that already have a solution.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    settings: Settings,
}

pub async fn enrich(args: EnrichArgs) -> anyhow::Result<ExitCode> {
    let config = args.settings.load()?;
    let templates = config.templates()?;
    let backends = config.build_backends()?;
    let engine = config.engine_config()?;
    let options = EnrichOptions {
        max_repairs: engine.max_repairs,
        params: engine.tutor_params,
        force: args.force,
    };
    let mut corpus = load_questions(&args.questions)?;
    let (mut done, mut skipped, mut failed) = (0, 0, 0);
    for record in &mut corpus {
        let backend = backends.session_backend(&record.id);
        match enrich_solution(record, &templates, backend.as_ref(), &options).await {
            Ok(true) => done += 1,
            Ok(false) => skipped += 1,
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", record.id);
            }
        }
    }
    let out = args.out.unwrap_or(args.questions);
    save_questions(&out, &corpus)?;
    eprintln!("enriched {done}, already enriched {skipped}, failed {failed}; wrote {}", out.display());
    Ok(if failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Enriched question corpus (JSON Lines).
    #[arg(long)]
    questions: PathBuf,
    /// Transcript file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Total conversations, spread round-robin over the questions.
    #[arg(long, conflicts_with = "per_question")]
    total: Option<usize>,
    #[arg(long)]
    per_question: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that a student turn contains a deliberate mistake.
    #[arg(long, default_value_t = StudentPolicy::DEFAULT_ERROR_RATE)]
    error_rate: f64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Keep conversations already in --out and generate only the rest.
    #[arg(long)]
    resume: bool,
    /// Record wall-clock start and finish times (output is then not
    /// byte-reproducible).
    #[arg(long)]
    timestamps: bool,
    #[command(flatten)]
    settings: Settings,
}

pub async fn generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    let config = args.settings.load()?;
    let engine = config.build_engine()?;
    let backends = config.build_backends()?;
    let corpus = load_questions(&args.questions)?;
    if let Some(r) = corpus.iter().find(|r| r.enriched.is_none()) {
        bail!("question {} has no enriched solution; run `soliloquy enrich` first", r.id);
    }
    let schedule = match (args.total, args.per_question) {
        (Some(n), _) => ScheduleSpec::Total(n),
        (None, Some(k)) => ScheduleSpec::PerQuestion(k),
        (None, None) => ScheduleSpec::PerQuestion(1),
    };

    let existing = if args.resume && args.out.exists() {
        import_transcripts(&args.out).with_context(|| format!("reading {}", args.out.display()))?
    } else {
        std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        Vec::new()
    };
    let completed: HashSet<String> = existing.iter().map(|c| c.id.clone()).collect();
    let options = GenerationOptions {
        schedule,
        corpus_seed: args.seed,
        error_rate: args.error_rate,
        workers: args.workers,
        completed,
        clock: if args.timestamps { Clock::System } else { Clock::None },
    };
    let sink = TranscriptSink::append(&args.out)?;
    let fresh = generate_corpus(&corpus, &engine, backends.as_ref(), &options, Some(&sink)).await?;

    let mut counts: HashMap<ConversationStatus, usize> = HashMap::new();
    for c in &fresh {
        *counts.entry(c.status).or_default() += 1;
    }
    let mut all: Vec<Conversation> = existing;
    all.extend(fresh.iter().cloned());
    let ids: Vec<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
    canonical_order(&mut all, &plan_schedule(&ids, schedule, args.seed)?);
    export_transcripts(&all, &args.out)?;
    let n = |s| counts.get(&s).copied().unwrap_or(0);
    eprintln!(
        "generated {} ({} complete, {} truncated, {} failed); {} conversations in {}",
        fresh.len(),
        n(ConversationStatus::Complete),
        n(ConversationStatus::Truncated),
        n(ConversationStatus::Failed),
        all.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    transcripts: PathBuf,
    /// Fine-tuning examples (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Only visible turns, without the soliloquy sub-turns.
    #[arg(long)]
    no_traces: bool,
    #[arg(long)]
    include_truncated: bool,
    #[arg(long)]
    include_failed: bool,
}

pub fn export(args: ExportArgs) -> anyhow::Result<ExitCode> {
    let conversations = import_transcripts(&args.transcripts)?;
    let options = FinetuneOptions {
        include_traces: !args.no_traces,
        include_truncated: args.include_truncated,
        include_failed: args.include_failed,
    };
    let n = export_finetune(&conversations, &args.out, options)?;
    eprintln!("{n} of {} conversations written to {}", conversations.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Test cases (JSON Lines). Built from --answers when absent.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// `{question_id: {"correct": .., "incorrect": ..}}`
    #[arg(long, requires = "questions")]
    answers: Option<PathBuf>,
    #[arg(long)]
    questions: Option<PathBuf>,
    /// Save the cases built from --answers.
    #[arg(long)]
    write_cases: Option<PathBuf>,
    /// SME labels (JSON Lines); later lines override earlier ones.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Conversations for the cases. With --run they are written here.
    #[arg(long)]
    sessions: Option<PathBuf>,
    /// Run every case against the tutorbot before judging.
    #[arg(long, requires_all = ["sessions", "questions"])]
    run: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

pub async fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let questions = match &args.questions {
        Some(p) => load_questions(p)?,
        None => Vec::new(),
    };
    let cases = match (&args.cases, &args.answers) {
        (Some(p), _) => load_cases(p)?,
        (None, Some(p)) => {
            let answers: HashMap<String, AnswerPair> = serde_json::from_str(&std::fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            let ids: Vec<&str> = questions.iter().map(|q| q.id.as_str()).collect();
            build_cases(&ids, &answers)?
        }
        (None, None) => bail!("give --cases, or --answers with --questions"),
    };
    if let Some(p) = &args.write_cases {
        save_cases(p, &cases)?;
    }
    let labels: Vec<LabelRecord> = match &args.labels {
        Some(p) => load_labels(p)?,
        None => Vec::new(),
    };
    let ids: Vec<&str> = cases.iter().map(|c| c.id.as_str()).collect();

    let judgments: Vec<CaseJudgment> = if args.run || args.sessions.is_some() {
        let config = args.settings.load()?;
        let engine = config.build_engine()?;
        let sessions_path = args.sessions.as_ref().expect("checked above");
        let conversations = if args.run {
            let backends = config.build_backends()?;
            let mut out = Vec::new();
            for case in &cases {
                let q = questions
                    .iter()
                    .find(|q| q.id == case.question_id)
                    .with_context(|| format!("case {} names unknown question {}", case.id, case.question_id))?;
                let solution = q
                    .enriched
                    .as_ref()
                    .with_context(|| format!("question {} is not enriched", q.id))?;
                let backend = backends.session_backend(&case.id);
                match run_case(&engine, backend.as_ref(), case, &q.question, solution).await {
                    Ok(c) => out.push(c),
                    Err(e) => {
                        eprintln!("{}: {e}", case.id);
                        let mut c = Conversation::new(&case.id, &case.question_id);
                        c.status = ConversationStatus::Failed;
                        c.failure = Some(e.to_string());
                        out.push(c);
                    }
                }
            }
            export_transcripts(&out, sessions_path)?;
            out
        } else {
            import_transcripts(sessions_path)?
        };
        let by_id: HashMap<&str, &Conversation> = conversations.iter().map(|c| (c.id.as_str(), c)).collect();
        let mut judgments = Vec::new();
        for case in &cases {
            let mut j = match by_id.get(case.id.as_str()) {
                Some(conv) => match judge_case(&case.id, conv, engine.executor().as_ref()).await {
                    Ok(j) => j,
                    Err(e @ EvalError::IncompleteRecord(..)) => {
                        eprintln!("{e}");
                        CaseJudgment::new(&case.id)
                    }
                    Err(e) => return Err(e.into()),
                },
                None => {
                    eprintln!("no conversation for case {}", case.id);
                    CaseJudgment::new(&case.id)
                }
            };
            apply_labels(&mut j, &labels);
            judgments.push(j);
        }
        judgments
    } else {
        judgments_from_labels(&ids, &labels)
    };

    let report = aggregate(&judgments);
    println!("{}", report.to_table());
    if let Some(p) = &args.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(ExitCode::SUCCESS)
}
