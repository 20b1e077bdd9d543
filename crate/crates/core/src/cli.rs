//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 usage, 2 data error, 3 internal error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::annotate::{self, mock, Annotator, Language, ResponseCache, RetryingClient};
use crate::bio::ExtractionTuple;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{self, SentenceRecord};
use crate::error::Error;
use crate::evaluation::{self, BenchmarkRecord, ScoreReport, SlotTuple};
use crate::pipeline::{self, RANK_GRID};
use crate::train::{MetricRecord, Stage};
use crate::vocab;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "polyoie", version, about = "Cross-lingual open information extraction")]
struct Cli {
    /// key = value configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra setting as key=value, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run training stages and write one checkpoint per stage.
    Train(TrainArgs),
    /// Extract tuples from a file with one whitespace-tokenized sentence per line.
    Extract(ExtractArgs),
    /// Build a multilingual corpus with the offline annotator.
    Annotate(AnnotateArgs),
    /// Score predictions against gold tuples or fact synsets.
    Score(ScoreArgs),
    /// Print per-language corpus statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Annotated corpus added to the stage-3 data.
    #[arg(long)]
    multilingual: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated stage numbers.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<u8>>,
    /// Checkpoint to continue from instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Skip the adapter stage.
    #[arg(long)]
    no_molora: bool,
    /// Train the adapters on the source language only.
    #[arg(long)]
    english_only_stage3: bool,
    /// After stages 1 and 2, train adapters for every rank in the grid and
    /// every top-k, and report the best k per rank.
    #[arg(long)]
    rank_sweep: bool,
    /// Gold fact synsets scored in the training report.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Ignore attached adapters.
    #[arg(long)]
    no_pool: bool,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Valid records go here, rejected ones to `<out>.rejected`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<String>>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    fan_out: Option<usize>,
    /// Fail when a larger share of records is rejected.
    #[arg(long)]
    max_rejection_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Output of `extract`.
    #[arg(long)]
    predictions: PathBuf,
    /// Gold corpus for tuple matching.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Gold fact synsets.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Machine-readable scores per language.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
}

/// One line of `extract` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub tuples: Vec<ExtractionTuple>,
    pub text: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Lib(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn exit_code(f: &Failure) -> i32 {
    match f {
        Failure::Usage(_) => EXIT_USAGE,
        Failure::Threshold(_) => EXIT_DATA,
        Failure::Lib(e) => match e {
            Error::Io { .. }
            | Error::Data { .. }
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Invalid(_) => EXIT_DATA,
            Error::Config(_) => EXIT_USAGE,
            Error::Shape { .. } | Error::NonFinite { .. } => EXIT_INTERNAL,
        },
    }
}

fn required(p: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| Failure::Usage(format!("no {what} given (flag or config key)")))
}

/// Config echo for report headers, each line commented out.
fn header(cfg: &RunConfig, command: &str) -> String {
    let mut s = format!("# polyoie {command}\n");
    for line in cfg.to_string().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Parses `args` (program name first) and runs the command, writing
/// reports to `out`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Threshold(m) => m.clone(),
                Failure::Lib(e) => e.to_string(),
            };
            let _ = writeln!(err, "error: {msg}");
            exit_code(&f)
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Train(a) => cmd_train(cfg, a, out),
        Command::Extract(a) => cmd_extract(cfg, a, out),
        Command::Annotate(a) => cmd_annotate(cfg, a, out),
        Command::Score(a) => cmd_score(cfg, a, out),
        Command::Stats(a) => cmd_stats(cfg, a, out),
    }
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    macro_rules! over {
        ($($f:ident),*) => {$(if let Some(v) = a.$f.clone() { cfg.$f = v.into(); })*};
    }
    over!(corpus, multilingual, benchmark, rank, experts, top_k);
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(p) = &a.init {
        cfg.checkpoint = Some(p.clone());
    }
    cfg.no_molora |= a.no_molora;
    cfg.english_only_stage3 |= a.english_only_stage3;
    let out_dir = required(cfg.out_dir.clone(), "output directory")?;
    let requested = a
        .stages
        .as_ref()
        .map(|s| s.iter().map(|&n| Stage::from_number(n)).collect::<crate::Result<Vec<_>>>())
        .transpose()?;
    let stages = if a.rank_sweep {
        if requested.is_some() || cfg.no_molora {
            return Err(Failure::Usage("--rank-sweep runs its own stages".into()));
        }
        vec![Stage::One, Stage::Two]
    } else {
        pipeline::resolve_stages(&cfg, requested.as_deref())?
    };

    let mut records = corpus::read_corpus(&required(cfg.corpus.clone(), "corpus")?)?;
    if let Some(m) = &cfg.multilingual {
        records.extend(corpus::read_corpus(m)?);
    }
    let bench: Vec<BenchmarkRecord> = match &cfg.benchmark {
        Some(p) => corpus::read_jsonl(p)?,
        None => Vec::new(),
    };
    let init = match &cfg.checkpoint {
        Some(p) if stages[0] != Stage::One || a.init.is_some() => Some(checkpoint::load(p)?),
        _ => None,
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let (tx, rx) = mpsc::channel::<MetricRecord>();
    let writer = {
        let path = metrics_path.clone();
        thread::spawn(move || -> crate::Result<()> {
            let mut lines = String::new();
            for m in rx {
                lines.push_str(&serde_json::to_string(&m).expect("metric serializes"));
                lines.push('\n');
            }
            fs::create_dir_all(path.parent().expect("file in a directory")).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, lines).map_err(|e| Error::io(&path, e))
        })
    };
    let trained = pipeline::train(&cfg, &stages, &records, init, &mut |m| {
        let _ = tx.send(m);
    });
    drop(tx);
    writer.join().expect("metrics writer does not panic")?;
    let trained = trained?;

    let mut report = header(&cfg, "train");
    for o in &trained {
        let path = out_dir.join(format!("{}.ckpt", o.report.stage));
        checkpoint::save(&o.model, &path)?;
        let losses: Vec<String> = o.report.epoch_losses.iter().map(|l| format!("{l:.6}")).collect();
        report.push_str(&format!(
            "{}: steps={} epoch_loss=[{}] checkpoint={}\n",
            o.report.stage,
            o.report.steps,
            losses.join(", "),
            path.display()
        ));
    }
    let last = &trained.last().expect("at least one stage").model;
    for (lang, r) in pipeline::evaluate(last, &records)? {
        report.push_str(&format!("train TupleMatch {lang}: {r}\n"));
    }
    for (lang, r) in pipeline::evaluate_benchmark(last, &bench)? {
        report.push_str(&format!("train FactSynset {lang}: {r}\n"));
    }
    if a.rank_sweep {
        let ks: Vec<usize> = (1..=cfg.experts).collect();
        let sweep = pipeline::rank_sweep(&cfg, last, &records, &records, &bench, &RANK_GRID, &ks, &mut |_, _, _| {})?;
        report.push_str("\nrank sweep (F1 x 100, best top-k per rank)\n");
        report.push_str(&sweep.to_string());
        write_file(
            &out_dir.join("rank_sweep.json"),
            &(serde_json::to_string_pretty(&sweep).expect("report serializes") + "\n"),
        )?;
    }
    write_file(&out_dir.join("report.txt"), &report)?;
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

pub fn extraction_records(model: &crate::model::Model, lines: &str, use_pool: bool) -> crate::Result<Vec<ExtractionRecord>> {
    let mut recs = Vec::new();
    for (i, line) in lines.lines().enumerate() {
        let tokens = vocab::tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        let tuples = model.extract(&tokens, use_pool)?;
        let text = tuples.iter().map(|t| t.render(&tokens)).collect();
        recs.push(ExtractionRecord {
            id: format!("line-{}", i + 1),
            tokens,
            tuples,
            text,
        });
    }
    Ok(recs)
}

fn cmd_extract(cfg: RunConfig, a: ExtractArgs, out: &mut dyn Write) -> CliResult<()> {
    let ckpt = required(a.checkpoint.or(cfg.checkpoint), "checkpoint")?;
    let model = checkpoint::load(&ckpt)?;
    let text = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let recs = extraction_records(&model, &text, !a.no_pool && model.pool.is_some())?;
    let body = corpus::to_jsonl(&recs);
    match &a.output {
        Some(p) => write_file(p, &body),
        None => write!(out, "{body}").map_err(|e| Error::io("<stdout>", e).into()),
    }
}

fn cmd_annotate(mut cfg: RunConfig, a: AnnotateArgs, out: &mut dyn Write) -> CliResult<()> {
    if let Some(c) = a.corpus {
        cfg.corpus = Some(c);
    }
    if let Some(l) = a.languages {
        cfg.languages = l;
    }
    if let Some(c) = a.cache {
        cfg.cache_dir = Some(c);
    }
    if let Some(f) = a.fan_out {
        cfg.fan_out = f;
    }
    if let Some(r) = a.max_rejection_rate {
        cfg.max_rejection_rate = r;
    }
    let source = corpus::read_corpus(&required(cfg.corpus.clone(), "corpus")?)?;
    let mut languages = Vec::new();
    for code in &cfg.languages {
        let lang = Language::from_code(code)?;
        let ex = mock::exemplar(code)
            .ok_or_else(|| Failure::Usage(format!("the offline annotator has no language {code:?}")))?;
        languages.push((lang, ex));
    }
    let client = RetryingClient::new(mock::MockAnnotator::new(&source));
    let cache = cfg.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
    let annotator = Annotator::new(&client, cache);
    let records = annotator.annotate_corpus(&source, &languages, cfg.fan_out)?;
    let (valid, rejected) = annotate::write_outputs(&a.out, &records)?;
    let total = records.len();
    let mut report = header(&cfg, "annotate");
    report.push_str(&format!(
        "records={total} valid={valid} rejected={rejected} client_requests={}\n",
        annotator.requests()
    ));
    let (ok, _) = annotate::split_records(&records);
    report.push_str(&annotate::compute_stats(&ok).to_string());
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    let rate = if total == 0 { 0.0 } else { rejected as f64 / total as f64 };
    if rate > cfg.max_rejection_rate {
        return Err(Failure::Threshold(format!(
            "rejection rate {rate:.3} exceeds the limit of {}",
            cfg.max_rejection_rate
        )));
    }
    Ok(())
}

fn cmd_score(cfg: RunConfig, a: ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.gold.is_none() && a.benchmark.is_none() {
        return Err(Failure::Usage("score needs --gold, --benchmark or both".into()));
    }
    let preds: Vec<ExtractionRecord> = corpus::read_jsonl(&a.predictions)?;
    let by_tokens = |tokens: &[String]| preds.iter().find(|p| p.tokens == tokens);
    let mut report = header(&cfg, "score");
    report.push_str("# tuple pair score: token F1 per slot, macro-averaged over slots\n");
    let mut json = serde_json::Map::new();
    let mut emit = |name: &str, scores: Vec<(String, ScoreReport)>, report: &mut String| {
        let mut per_lang = serde_json::Map::new();
        for (lang, r) in scores {
            report.push_str(&format!("{name:<10} {lang:<4} {r}\n"));
            per_lang.insert(
                lang,
                serde_json::json!({"precision": r.precision, "recall": r.recall, "f1": r.f1}),
            );
        }
        json.insert(name.to_string(), per_lang.into());
    };
    if let Some(g) = &a.gold {
        let gold = corpus::read_corpus(g)?;
        let mut per_lang: std::collections::BTreeMap<String, Vec<_>> = Default::default();
        for rec in &gold {
            let pred: Vec<SlotTuple> = by_tokens(&rec.tokens)
                .map(|p| p.tuples.iter().map(|t| SlotTuple::from_extraction(&p.tokens, t)).collect())
                .unwrap_or_default();
            per_lang
                .entry(rec.lang.clone())
                .or_default()
                .push(evaluation::tuple_match_sentence(&rec.id, &pred, &pipeline::slot_tuples(rec)));
        }
        let scores = per_lang
            .into_iter()
            .map(|(l, s)| (l, ScoreReport::from_sentences(s, false)))
            .collect();
        emit("TupleMatch", scores, &mut report);
    }
    if let Some(b) = &a.benchmark {
        let bench: Vec<BenchmarkRecord> = corpus::read_jsonl(b)?;
        let mut per_lang: std::collections::BTreeMap<String, Vec<_>> = Default::default();
        for rec in &bench {
            let triples: Vec<_> = by_tokens(&rec.tokens)
                .map(|p| p.tuples.iter().map(|t| SlotTuple::from_extraction(&p.tokens, t).triple()).collect())
                .unwrap_or_default();
            let synsets = rec.synsets.iter().map(|s| s.expand()).collect::<crate::Result<Vec<_>>>()?;
            per_lang
                .entry(rec.lang.clone())
                .or_default()
                .push(evaluation::fact_synset_sentence(&rec.id, &triples, &synsets));
        }
        let scores = per_lang
            .into_iter()
            .map(|(l, s)| (l, ScoreReport::from_sentences(s, true)))
            .collect();
        emit("FactSynset", scores, &mut report);
    }
    if let Some(p) = &a.json {
        write_file(p, &(serde_json::Value::Object(json).to_string() + "\n"))?;
    }
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn cmd_stats(mut cfg: RunConfig, a: StatsArgs, out: &mut dyn Write) -> CliResult<()> {
    if let Some(c) = a.corpus {
        cfg.corpus = Some(c);
    }
    let records: Vec<SentenceRecord> = corpus::read_corpus(&required(cfg.corpus.clone(), "corpus")?)?;
    let mut report = header(&cfg, "stats");
    report.push_str(&annotate::compute_stats(&records).to_string());
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}
