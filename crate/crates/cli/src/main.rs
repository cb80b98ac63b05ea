//! Command-line interface: build/inspect a graph, generate relation
//! descriptions, train a checkpoint, ask single questions, evaluate question
//! sets, and benchmark propagation range.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kgqa_core::embed::{
    describe_all_relations, EmbeddingProvider, HashEmbedder, PrecomputedProvider,
    RelationDescriptionTable, RemoteEncoder, RemoteEncoderConfig,
};
use kgqa_core::eval::{bench_app, bench_csv, evaluate, EvalReport};
use kgqa_core::kg::{load_questions, EntityId, KnowledgeGraph, QuestionInstance};
use kgqa_core::llm::{LlmClient, RemoteChatClient, RemoteChatConfig, ScriptEntry, ScriptedClient};
use kgqa_core::model::{Dims, ModelParams};
use kgqa_core::pipeline::{
    build_templates, run_pipeline, PipelineConfig, Retriever, SessionStatus, TemplateTable,
};
use kgqa_core::propagation::LAMBDA_UNLIMITED;
use kgqa_core::retrieve::RetrievalLimits;
use kgqa_core::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "kgqa", version, about = "Knowledge-graph question answering engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a triple file, augment it with inverse facts, and print stats.
    Build(BuildArgs),
    /// Generate one textual description per relation via an LLM.
    Describe(DescribeArgs),
    /// Pre-train a checkpoint on question-answer supervision.
    Train(TrainArgs),
    /// Answer a single question with the full reasoning loop.
    Ask(AskArgs),
    /// Run the reasoning loop over a question file and report F1/Hit/H@1.
    Eval(EvalArgs),
    /// Measure propagation range per configuration and emit CSV.
    BenchApp(BenchArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Triple TSV: subject<TAB>relation<TAB>object per line.
    #[arg(long)]
    graph: PathBuf,
}

#[derive(Args)]
struct LlmArgs {
    /// LLM backend: `scripted:<path>` (JSON matcher/reply list) or `remote`.
    #[arg(long, default_value = "scripted:script.json")]
    llm: String,
    /// Base URL for the remote chat endpoint (credential via KGQA_LLM_API_KEY).
    #[arg(long, default_value = "https://api.openai.com/v1")]
    llm_url: String,
    /// Model name for the remote chat endpoint.
    #[arg(long, default_value = "gpt-4o-mini")]
    llm_model: String,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
    /// Example facts shown per relation in the prompt.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    /// Output description TSV (label, provenance, description).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Embedding backend: `hash[:seed]`, `file:<path>`, or `remote`
    /// (endpoint via KGQA_ENCODER_URL).
    #[arg(long, default_value = "hash:0")]
    embeddings: String,
    /// Relation description TSV from `describe`; relation names when absent.
    #[arg(long)]
    descriptions: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Training questions (JSONL).
    #[arg(long)]
    questions: PathBuf,
    /// Dev questions for early stopping (JSONL).
    #[arg(long)]
    dev: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training log (JSONL), one record per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    dim_attn: usize,
    /// Per-relation neighbor threshold; `inf` disables pruning.
    #[arg(long, default_value = "100")]
    lambda: String,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[command(flatten)]
    llm: LlmArgs,
    /// The question text.
    #[arg(long)]
    question: String,
    /// Comma-separated topic entity labels.
    #[arg(long)]
    topics: String,
    /// Optional comma-separated candidate-answer labels.
    #[arg(long)]
    candidates: Option<String>,
    /// Build verbalization templates with the LLM instead of fallbacks.
    #[arg(long)]
    llm_templates: bool,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    path_cap: usize,
    #[arg(long, default_value = "100")]
    lambda: String,
    #[arg(long, default_value_t = 3)]
    max_steps: usize,
    /// Write the full prompt/reply transcript to this file.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[command(flatten)]
    llm: LlmArgs,
    #[arg(long)]
    llm_templates: bool,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    path_cap: usize,
    #[arg(long, default_value = "100")]
    lambda: String,
    #[arg(long, default_value_t = 3)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concurrent questions.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the JSON report here (stdout summary either way).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    questions: PathBuf,
    /// Comma-separated thresholds, e.g. `10,100,inf`.
    #[arg(long, default_value = "10,100,1000")]
    lambdas: String,
    /// Disable progressive expansion (expand from every entity each hop).
    #[arg(long)]
    pe_off: bool,
    /// Disable asymmetric pruning (single unlimited row; lambdas ignored).
    #[arg(long)]
    ap_off: bool,
    #[arg(long, default_value_t = 3)]
    hops: usize,
    /// Abort a configuration once a question's edge set exceeds this.
    #[arg(long)]
    edge_cap: Option<usize>,
    /// Output CSV path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Build(args) => cmd_build(args),
        Command::Describe(args) => cmd_describe(args),
        Command::Train(args) => cmd_train(args),
        Command::Ask(args) => cmd_ask(args),
        Command::Eval(args) => cmd_eval(args),
        Command::BenchApp(args) => cmd_bench(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    let g = KnowledgeGraph::load_triples(path)
        .with_context(|| format!("loading graph {}", path.display()))?;
    g.augment_inverse().context("augmenting graph")
}

fn parse_lambda(raw: &str) -> Result<usize> {
    if raw.eq_ignore_ascii_case("inf") {
        return Ok(LAMBDA_UNLIMITED);
    }
    raw.parse::<usize>()
        .with_context(|| format!("invalid lambda {raw:?}"))
}

fn parse_labels(g: &KnowledgeGraph, raw: &str) -> Result<Vec<EntityId>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|label| {
            g.entity_by_label(label)
                .with_context(|| format!("unknown entity label {label:?}"))
        })
        .collect()
}

fn build_provider(args: &EmbeddingArgs, dim: usize, seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
    let spec = args.embeddings.as_str();
    if let Some(rest) = spec.strip_prefix("hash") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s.parse::<u64>().with_context(|| format!("bad hash seed {s:?}"))?,
            None if rest.is_empty() => seed,
            _ => bail!("invalid embeddings spec {spec:?}"),
        };
        return Ok(Box::new(HashEmbedder::new(dim, seed)));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let provider = PrecomputedProvider::load(Path::new(path), dim)
            .with_context(|| format!("loading embeddings {path}"))?;
        return Ok(Box::new(provider));
    }
    if spec == "remote" {
        let config = RemoteEncoderConfig::from_env(dim).context("remote encoder config")?;
        return Ok(Box::new(RemoteEncoder::new(config)?));
    }
    bail!("invalid embeddings spec {spec:?} (expected hash[:seed], file:<path>, or remote)")
}

fn load_descriptions(
    args: &EmbeddingArgs,
    g: &KnowledgeGraph,
) -> Result<RelationDescriptionTable> {
    match &args.descriptions {
        Some(path) => RelationDescriptionTable::load(path, g)
            .with_context(|| format!("loading descriptions {}", path.display())),
        None => Ok(RelationDescriptionTable::from_names(g)),
    }
}

/// Per-session LLM construction: scripted clients replay a fresh copy of the
/// script for every session; the remote client is shared.
enum LlmFactory {
    Scripted(Vec<ScriptEntry>),
    Remote(Arc<RemoteChatClient>),
}

struct SharedClient(Arc<RemoteChatClient>);

impl LlmClient for SharedClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, kgqa_core::llm::LlmError> {
        self.0.complete(prompt)
    }
}

impl LlmFactory {
    fn new(args: &LlmArgs) -> Result<Self> {
        if let Some(path) = args.llm.strip_prefix("scripted:") {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading script {path}"))?;
            let entries: Vec<ScriptEntry> = serde_json::from_str(&text)
                .with_context(|| format!("parsing script {path}"))?;
            return Ok(Self::Scripted(entries));
        }
        if args.llm == "remote" {
            let config = RemoteChatConfig::new(&args.llm_url, &args.llm_model);
            return Ok(Self::Remote(Arc::new(RemoteChatClient::new(config)?)));
        }
        bail!("invalid llm spec {:?} (expected scripted:<path> or remote)", args.llm)
    }

    fn session_client(&self) -> Box<dyn LlmClient> {
        match self {
            Self::Scripted(entries) => Box::new(ScriptedClient::new(entries.clone())),
            Self::Remote(client) => Box::new(SharedClient(client.clone())),
        }
    }
}

fn cmd_build(args: BuildArgs) -> Result<()> {
    let forward = KnowledgeGraph::load_triples(&args.graph)
        .with_context(|| format!("loading graph {}", args.graph.display()))?;
    let forward_triples = forward.triple_count();
    let forward_relations = forward.relation_count();
    let g = forward.augment_inverse().context("augmenting graph")?;
    println!("entities:           {}", g.entity_count());
    println!("forward relations:  {forward_relations}");
    println!("forward triples:    {forward_triples}");
    println!("augmented relations: {}", g.relation_count());
    println!("augmented triples:  {}", g.triple_count());
    Ok(())
}

fn cmd_describe(args: DescribeArgs) -> Result<()> {
    let g = load_graph(&args.graph)?;
    let factory = LlmFactory::new(&args.llm)?;
    let client = factory.session_client();
    let table = describe_all_relations(&g, client.as_ref(), args.samples);
    table.save(&args.out, &g)?;
    println!(
        "wrote {} relation descriptions to {}",
        table.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let g = load_graph(&args.graph)?;
    let dims = Dims::new(args.layers, args.dim, args.dim_attn)?;
    let provider = build_provider(&args.embeddings, dims.hidden, args.seed)?;
    let descriptions = load_descriptions(&args.embeddings, &g)?;
    let dataset = load_questions(&args.questions, &g)?;
    let dev = load_questions(&args.dev, &g)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        lambda: parse_lambda(&args.lambda)?,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&dataset, &dev, &g, provider.as_ref(), &descriptions, dims, &config)?;
    outcome.params.save(&args.checkpoint)?;
    if let Some(log_path) = &args.log {
        let mut text = String::new();
        for record in &outcome.log {
            text.push_str(&serde_json::to_string(record)?);
            text.push('\n');
        }
        std::fs::write(log_path, text)
            .with_context(|| format!("writing log {}", log_path.display()))?;
    }
    if outcome.skipped_questions > 0 {
        eprintln!(
            "warning: skipped {} question(s) whose propagation reaches no answer",
            outcome.skipped_questions
        );
    }
    println!(
        "trained {} epoch(s); best dev H@1 {:.4} at epoch {}; checkpoint {}",
        outcome.log.len(),
        outcome.best_dev_h1,
        outcome.best_epoch,
        args.checkpoint.display()
    );
    Ok(())
}

struct Engine<'a> {
    retriever: Retriever<'a>,
    templates: TemplateTable,
    config: PipelineConfig,
}

#[allow(clippy::too_many_arguments)]
fn build_engine<'a>(
    g: &'a KnowledgeGraph,
    params: &'a ModelParams<f32>,
    provider: &'a dyn EmbeddingProvider,
    descriptions: &RelationDescriptionTable,
    factory: &LlmFactory,
    llm_templates: bool,
    limits: RetrievalLimits,
    lambda: usize,
    max_steps: usize,
) -> Result<Engine<'a>> {
    let retriever = Retriever::new(g, params, provider, descriptions, lambda, limits)?;
    let templates = if llm_templates {
        let client = factory.session_client();
        build_templates(g, client.as_ref(), descriptions)
    } else {
        TemplateTable::fallback(g)
    };
    Ok(Engine {
        retriever,
        templates,
        config: PipelineConfig { max_steps },
    })
}

fn cmd_ask(args: AskArgs) -> Result<()> {
    let g = load_graph(&args.graph)?;
    let params = ModelParams::<f32>::load(&args.checkpoint)?;
    let provider = build_provider(&args.embeddings, params.dims.hidden, 0)?;
    let descriptions = load_descriptions(&args.embeddings, &g)?;
    let factory = LlmFactory::new(&args.llm)?;
    let limits = RetrievalLimits {
        k: args.k,
        n: args.n,
        path_cap: args.path_cap,
    };
    let engine = build_engine(
        &g,
        &params,
        provider.as_ref(),
        &descriptions,
        &factory,
        args.llm_templates,
        limits,
        parse_lambda(&args.lambda)?,
        args.max_steps,
    )?;
    let question = QuestionInstance {
        text: args.question.clone(),
        topics: parse_labels(&g, &args.topics)?,
        answers: Vec::new(),
        candidates: args
            .candidates
            .as_deref()
            .map(|c| parse_labels(&g, c))
            .transpose()?,
    };
    let client = factory.session_client();
    let (answers, session) = run_pipeline(
        &question,
        &engine.retriever,
        &engine.templates,
        client.as_ref(),
        &engine.config,
    )?;
    let status = match session.status {
        SessionStatus::Confirmed => "confirmed",
        SessionStatus::Exhausted => "exhausted",
        SessionStatus::Running => "running",
    };
    println!("status: {status} (after {} step(s))", session.step);
    if answers.is_empty() {
        println!("answers: (none)");
    } else {
        for (i, answer) in answers.iter().enumerate() {
            let marker = if answer.entity.is_some() { "" } else { " [non-KG]" };
            println!("answer {}: {}{marker}", i + 1, answer.text);
        }
    }
    for warning in &session.warnings {
        eprintln!("warning: {warning}");
    }
    if let Some(path) = &args.transcript {
        std::fs::write(path, session.transcript_text())
            .with_context(|| format!("writing transcript {}", path.display()))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let g = load_graph(&args.graph)?;
    let params = ModelParams::<f32>::load(&args.checkpoint)?;
    let provider = build_provider(&args.embeddings, params.dims.hidden, args.seed)?;
    let descriptions = load_descriptions(&args.embeddings, &g)?;
    let factory = LlmFactory::new(&args.llm)?;
    let limits = RetrievalLimits {
        k: args.k,
        n: args.n,
        path_cap: args.path_cap,
    };
    let engine = build_engine(
        &g,
        &params,
        provider.as_ref(),
        &descriptions,
        &factory,
        args.llm_templates,
        limits,
        parse_lambda(&args.lambda)?,
        args.max_steps,
    )?;
    let questions = load_questions(&args.questions, &g)?;
    let report: EvalReport = evaluate(&g, &questions, args.workers, |_, question| {
        let client = factory.session_client();
        run_pipeline(
            question,
            &engine.retriever,
            &engine.templates,
            client.as_ref(),
            &engine.config,
        )
        .map(|(answers, _)| answers.into_iter().map(|a| a.text).collect())
        .map_err(|e| e.to_string())
    })?;
    for row in &report.per_question {
        println!(
            "f1={:.4} hit={} h@1={} pred=[{}] gold=[{}] {}",
            row.f1,
            row.hit as u8,
            row.h1 as u8,
            row.predicted.join("|"),
            row.gold.join("|"),
            row.question
        );
    }
    println!(
        "questions={} mean_f1={:.4} hit={:.4} h@1={:.4}",
        report.count, report.mean_f1, report.hit_rate, report.h1_rate
    );
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let g = load_graph(&args.graph)?;
    let questions = load_questions(&args.questions, &g)?;
    let lambdas = args
        .lambdas
        .split(',')
        .map(|s| parse_lambda(s.trim()))
        .collect::<Result<Vec<usize>>>()?;
    let rows = bench_app(
        &g,
        &questions,
        args.hops,
        &lambdas,
        !args.pe_off,
        !args.ap_off,
        args.edge_cap,
    )?;
    let csv = bench_csv(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, &csv)
            .with_context(|| format!("writing csv {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}
