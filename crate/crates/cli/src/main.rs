use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ipt_core::assembly::{assemble_mshot_with, load_template_pool, AssembledLine, TemplatePool};
use ipt_core::backend::open_backend;
use ipt_core::config::{validate_config, CounterChoice, PipelineConfig};
use ipt_core::contam::{self, ContamConfig, ContamMode};
use ipt_core::corpus::load_corpus;
use ipt_core::jsonl;
use ipt_core::metrics::{self, DomainLabelSet, F1Options, PairQualityMode};
use ipt_core::mixing::{self, MixSpec};
use ipt_core::packing::{pack_tuning_sequences, select_tuning_subset};
use ipt_core::pipeline::{run_pipeline_with, PipelineOptions, PipelineStatus};
use ipt_core::synthesis::{load_store, plan_rounds, select_fraction, SynthesisRun};
use ipt_core::template::{parse_example_with_issues, render_example, InstructionResponsePair, SentinelConfig, SynthesisExample};

/// Build instruction-augmented pre-training corpora. Paths given as "-"
/// read stdin or write stdout.
#[derive(Parser)]
#[command(name = "ipt", version)]
struct Cli {
    /// Seed for every seeded step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline config JSON; its sentinels apply to every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print errors as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Sentinel config JSON (overrides the one in --config).
    #[arg(long, global = true)]
    sentinels: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render examples to the sentinel format, or parse them back.
    Format {
        #[command(subcommand)]
        action: FormatAction,
    },
    /// Pack synthesizer-tuning examples into fixed-budget sequences.
    Pack(PackArgs),
    /// Run multi-round instruction synthesis over a corpus.
    Synthesize(SynthesizeArgs),
    /// Turn a synthesis store into M-shot documents.
    Assemble(AssembleArgs),
    /// Mix sources with repeat ratios into one shuffled stream.
    Mix {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        metric: EvalMetric,
    },
    /// Substring contamination between evaluation sets and training streams.
    Contam(ContamArgs),
    /// plan → synthesize → assemble → mix from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum FormatAction {
    /// SynthesisExample JSONL → {"source_id", "text"} JSONL.
    Render {
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
    /// {"text"} JSONL → SynthesisExample JSONL; parse issues go to stderr.
    Parse {
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct PackArgs {
    #[arg(long, default_value = "-")]
    input: PathBuf,
    #[arg(long, default_value_t = 2048)]
    max_len: usize,
    /// Keep at most this many examples, most pairs first.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, value_enum, default_value_t = Counter::Whitespace)]
    counter: Counter,
    /// Where to write the skip report.
    #[arg(long)]
    skipped: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Counter {
    Whitespace,
    Words,
}

impl From<Counter> for CounterChoice {
    fn from(c: Counter) -> Self {
        match c {
            Counter::Whitespace => CounterChoice::Whitespace,
            Counter::Words => CounterChoice::Words,
        }
    }
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// `stub:...` or an http(s) completion endpoint; the bearer token is read
    /// from IPT_API_TOKEN.
    #[arg(long)]
    backend: String,
    #[arg(long, default_value_t = 16)]
    in_flight: usize,
    #[arg(long, default_value_t = 700)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 4096)]
    max_len: usize,
    #[arg(long)]
    stop_after_round: Option<usize>,
}

#[derive(Args)]
struct AssembleArgs {
    /// Directory written by `synthesize`.
    #[arg(long)]
    store: PathBuf,
    /// Template pool JSON; the built-in pool when omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalMetric {
    /// Token F1 between predicted and gold responses, paired by line.
    F1 {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        remove_articles: bool,
    },
    /// Pair-set quality between predicted and gold pair lists, paired by line.
    Pairs {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = PairMode::Matching)]
        mode: PairMode,
    },
    /// Domain coverage and overlap over labeled rows.
    Domains {
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PairMode {
    Matching,
    Concatenated,
}

#[derive(Args)]
struct ContamArgs {
    /// Evaluation sets; the dataset id is the file stem.
    #[arg(long = "eval", num_args = 1.., required = true)]
    eval: Vec<PathBuf>,
    /// Training streams, each reported separately.
    #[arg(long = "train", num_args = 1.., required = true)]
    train: Vec<PathBuf>,
    #[arg(long = "L", default_value_t = 50)]
    substring_len: usize,
    /// Index stride in fast mode; defaults to half the substring length.
    #[arg(long)]
    stride: Option<usize>,
    /// Probes per example in fast mode.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Fast)]
    mode: Mode,
    /// Add augmented − raw rows, taking the first two --train streams as
    /// raw and augmented.
    #[arg(long)]
    delta: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fast,
    Exhaustive,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    /// Stop once this 0-based synthesis round is persisted; re-run to resume.
    #[arg(long)]
    stop_after_round: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_errors = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report(&err, json_errors);
            match err.downcast_ref::<ipt_core::Error>() {
                Some(ipt_core::Error::ConfigInvalid(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn report(err: &anyhow::Error, json: bool) {
    if !json {
        eprintln!("error: {err:#}");
        return;
    }
    let core = err.downcast_ref::<ipt_core::Error>();
    let mut body = serde_json::json!({
        "kind": core.map_or("Error", |e| e.kind()),
        "message": format!("{err:#}"),
    });
    let mut inner = core;
    while let Some(ipt_core::Error::Stage { stage, source }) = inner {
        body["stage"] = (*stage).into();
        body["kind"] = source.kind().into();
        inner = Some(source);
    }
    if let Some(ipt_core::Error::ConfigInvalid(v)) = inner {
        body["violations"] = serde_json::json!(v);
    }
    eprintln!("{}", serde_json::json!({ "error": body }));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base_config = match &cli.config {
        Some(path) => Some(PipelineConfig::load(path)?),
        None => None,
    };
    let sentinels = match (&cli.sentinels, &base_config) {
        (Some(path), _) => SentinelConfig::load(path)?,
        (None, Some(cfg)) => cfg.sentinels.clone(),
        (None, None) => SentinelConfig::default(),
    };
    let seed = cli.seed.or(base_config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let out = cli.out.clone();
    let out_or_stdout = || out.clone().unwrap_or_else(|| PathBuf::from("-"));

    match cli.command {
        Command::Format { action } => match action {
            FormatAction::Render { input } => {
                let examples: Vec<SynthesisExample> = jsonl::read(&input)?;
                let mut lines = Vec::with_capacity(examples.len());
                for ex in &examples {
                    let text = render_example(ex, &sentinels)
                        .with_context(|| format!("rendering example {:?}", ex.source_id))?;
                    lines.push(serde_json::json!({ "source_id": ex.source_id, "text": text }));
                }
                write_jsonl(&out_or_stdout(), &lines)
            }
            FormatAction::Parse { input } => {
                #[derive(Deserialize)]
                struct Line {
                    text: String,
                    #[serde(default)]
                    source_id: String,
                }
                let lines: Vec<Line> = jsonl::read(&input)?;
                let mut examples = Vec::with_capacity(lines.len());
                for (n, line) in lines.into_iter().enumerate() {
                    let (mut ex, issues) = parse_example_with_issues(&line.text, &sentinels)
                        .with_context(|| format!("line {}", n + 1))?;
                    for issue in issues {
                        eprintln!("line {}: {}", n + 1, serde_json::to_string(&issue)?);
                    }
                    ex.source_id = line.source_id;
                    examples.push(ex);
                }
                write_jsonl(&out_or_stdout(), &examples)
            }
        },
        Command::Pack(args) => {
            let mut examples: Vec<SynthesisExample> = jsonl::read(&args.input)?;
            if let Some(cap) = args.cap {
                examples = select_tuning_subset(&examples, cap);
            }
            let counter = CounterChoice::from(args.counter).counter();
            let outcome = pack_tuning_sequences(&examples, args.max_len, &counter, &sentinels, seed)?;
            write_jsonl(&out_or_stdout(), &outcome.sequences)?;
            if let Some(path) = &args.skipped {
                jsonl::write(path, &outcome.skipped)?;
            } else if !outcome.skipped.is_empty() {
                eprintln!("{} examples skipped (use --skipped to save the report)", outcome.skipped.len());
            }
            Ok(())
        }
        Command::Synthesize(args) => {
            let dir = out.context("synthesize needs --out <dir>")?;
            let mut cfg = PipelineConfig::new(&args.corpus, &dir, args.rounds);
            cfg.sentinels = sentinels.clone();
            cfg.backend.in_flight = args.in_flight;
            cfg.backend.max_new_tokens = args.max_new_tokens;
            cfg.max_seq_len.inference = args.max_len;
            let corpus = load_corpus(&args.corpus)?;
            let ids: Vec<String> = corpus.iter().map(|d| d.id.clone()).collect();
            let (selected, rest) = select_fraction(&ids, args.fraction, seed);
            let plan = plan_rounds(&selected, args.rounds, seed)?;
            let backend = open_backend(&args.backend, &sentinels, cfg.backend.timeout())?;
            let settings = cfg.synthesis_settings();
            let counter = cfg.token_counter.counter();
            let run = SynthesisRun {
                dir: dir.clone(),
                plan,
                settings: &settings,
                backend: backend.as_ref(),
                backend_id: args.backend.clone(),
                counter: &counter,
            };
            let texts: HashMap<String, String> = corpus.into_iter().map(|d| (d.id, d.text)).collect();
            let store = run.run(&texts, args.stop_after_round)?;
            let issues: usize = (0..store.completed_rounds()).map(|r| run.issues(r).map_or(0, |v| v.len())).sum();
            print_json(&serde_json::json!({
                "completed_rounds": store.completed_rounds(),
                "examples": store.iter().count(),
                "issues": issues,
                "passed_through": rest.len(),
                "dir": dir,
            }))
        }
        Command::Assemble(args) => {
            let pool = match &args.templates {
                Some(p) => load_template_pool(p)?,
                None => TemplatePool::builtin(),
            };
            let store = load_store(&args.store)?;
            if store.completed_rounds() == 0 {
                bail!("{} holds no completed rounds", args.store.display());
            }
            let counter = base_config.as_ref().map_or(CounterChoice::Whitespace, |c| c.token_counter).counter();
            let mut lines = Vec::new();
            for chain in store.leaf_chains() {
                lines.push(AssembledLine::from(&assemble_mshot_with(&chain, &pool, seed, &counter)?));
            }
            write_jsonl(&out_or_stdout(), &lines)
        }
        Command::Mix { spec } => {
            let mut spec = MixSpec::load(&spec)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let manifest = mixing::mix(&spec, &out_or_stdout())?;
            eprintln!("{}", serde_json::to_string(&manifest)?);
            Ok(())
        }
        Command::Eval { metric } => match metric {
            EvalMetric::F1 { pred, gold, remove_articles } => {
                let preds = read_texts(&pred)?;
                let golds = read_texts(&gold)?;
                if preds.len() != golds.len() {
                    bail!("{} predictions but {} gold answers", preds.len(), golds.len());
                }
                let opts = F1Options { remove_articles };
                let scores =
                    preds.iter().zip(&golds).map(|(p, g)| metrics::token_f1_with(p, g, opts)).collect();
                let report = metrics::EvalReport::from_scores(scores);
                write_json(&out_or_stdout(), &serde_json::json!({
                    "mean": report.mean,
                    "percent": report.percent(),
                    "count": report.count,
                    "scores": report.scores,
                }))
            }
            EvalMetric::Pairs { pred, gold, mode } => {
                #[derive(Deserialize)]
                struct Pairs {
                    pairs: Vec<InstructionResponsePair>,
                }
                let preds: Vec<Pairs> = jsonl::read(&pred)?;
                let golds: Vec<Pairs> = jsonl::read(&gold)?;
                if preds.len() != golds.len() {
                    bail!("{} predicted pair sets but {} gold sets", preds.len(), golds.len());
                }
                let mode = match mode {
                    PairMode::Matching => PairQualityMode::Matching,
                    PairMode::Concatenated => PairQualityMode::Concatenated,
                };
                let scores = preds
                    .iter()
                    .zip(&golds)
                    .map(|(p, g)| metrics::pair_set_quality_with(&p.pairs, &g.pairs, mode))
                    .collect();
                write_json(&out_or_stdout(), &metrics::EvalReport::from_scores(scores))
            }
            EvalMetric::Domains { labels } => {
                let rows: Vec<DomainLabelSet> = jsonl::read(&labels)?;
                write_json(&out_or_stdout(), &metrics::domain_report(&rows))
            }
        },
        Command::Contam(args) => {
            let mode = match args.mode {
                Mode::Fast => ContamMode::Fast,
                Mode::Exhaustive => ContamMode::Exhaustive,
            };
            let cfg = ContamConfig {
                substring_len: args.substring_len,
                stride: args.stride.unwrap_or((args.substring_len / 2).max(1)),
                samples_per_example: args.k,
                mode,
                seed,
            };
            cfg.validate()?;
            let sets = args.eval.iter().map(|p| contam::load_eval_set(p)).collect::<Result<Vec<_>, _>>()?;
            let mut streams = Vec::with_capacity(args.train.len());
            for p in &args.train {
                streams.push((p.display().to_string(), contam::load_training_stream(p)?));
            }
            let ids: Vec<String> = streams.iter().map(|(id, _)| id.clone()).collect();
            let mut report = contam::contamination_report(&sets, streams, &cfg)?;
            if args.delta {
                if ids.len() < 2 {
                    bail!("--delta needs two --train streams (raw, then augmented)");
                }
                report.delta = report.difference(&ids[0], &ids[1]).expect("both streams were checked");
            }
            write_json(&out_or_stdout(), &report)
        }
        Command::Pipeline(args) => {
            let mut cfg = match (base_config, &cli.config) {
                (Some(cfg), Some(path)) => {
                    validate_config(path)?;
                    cfg
                }
                _ => bail!("pipeline needs --config <file>"),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(b) = args.backend {
                cfg.backend.url = b;
            }
            if let Some(r) = args.rounds {
                cfg.num_rounds = r;
            }
            if let Some(f) = args.fraction {
                cfg.fraction = f;
            }
            let outcome = run_pipeline_with(&cfg, PipelineOptions { stop_after_round: args.stop_after_round })?;
            print_json(&serde_json::json!({
                "status": outcome.status,
                "out_dir": cfg.out_dir,
                "skipped": outcome.skipped,
                "augmented_docs": outcome.augmented_docs,
                "raw_docs": outcome.raw_docs,
                "synthesis_issues": outcome.synthesis_issues,
            }))?;
            if let PipelineStatus::Stopped { .. } = outcome.status {
                eprintln!("stopped early; run again to resume");
            }
            Ok(())
        }
    }
}

/// Lines that are JSON strings or objects with a `text` (or `response`) field.
fn read_texts(path: &Path) -> anyhow::Result<Vec<String>> {
    let values: Vec<serde_json::Value> = jsonl::read(path)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let text = match &v {
                serde_json::Value::String(s) => Some(s.as_str()),
                serde_json::Value::Object(m) => {
                    m.get("text").or_else(|| m.get("response")).and_then(|t| t.as_str())
                }
                _ => None,
            };
            text.map(str::to_string)
                .with_context(|| format!("{}:{}: expected a string or an object with \"text\"", path.display(), i + 1))
        })
        .collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut w = jsonl::open_writer(path)?;
    jsonl::write_to(&mut w, items)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = jsonl::open_writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}
