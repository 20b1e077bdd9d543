//! End-to-end runs shared by the command line and the tests: staged
//! training, corpus evaluation and the adapter rank sweep.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::SentenceRecord;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{self, BenchmarkRecord, ScoreReport, SlotTuple};
use crate::model::{Model, ModelConfig};
use crate::molora::PoolConfig;
use crate::train::{self, LanguageSet, MetricRecord, Stage, StageConfig, StageReport};
use crate::vocab::Vocab;

pub const SOURCE_LANGUAGE: &str = "en";
pub const RANK_GRID: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

pub fn model_config(cfg: &RunConfig, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size,
            hidden_size: cfg.hidden_size,
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            ff_size: cfg.ff_size,
            max_len: cfg.max_len,
        },
        ..ModelConfig::with_vocab(vocab_size)
    }
}

/// Vocabulary over every token of the given corpora, in first-seen order.
pub fn build_vocab(corpora: &[&[SentenceRecord]]) -> Vocab {
    Vocab::build(corpora.iter().flat_map(|c| c.iter().map(|r| r.tokens.as_slice())))
}

pub fn stage_config(cfg: &RunConfig, stage: Stage) -> StageConfig {
    let i = stage.number() as usize - 1;
    StageConfig {
        epochs: cfg.epochs[i],
        batch_size: cfg.batch_size[i],
        learning_rate: cfg.learning_rate[i],
        seed: cfg.seed,
        ..StageConfig::new(stage)
    }
}

/// The stages a run performs: all three, or the first two without adapters.
pub fn resolve_stages(cfg: &RunConfig, requested: Option<&[Stage]>) -> Result<Vec<Stage>> {
    let mut stages = match requested {
        Some(s) => s.to_vec(),
        None if cfg.no_molora => vec![Stage::One, Stage::Two],
        None => Stage::ALL.to_vec(),
    };
    stages.sort();
    stages.dedup();
    if stages.is_empty() {
        return Err(Error::Config("no stages requested".into()));
    }
    if cfg.no_molora && stages.contains(&Stage::Three) {
        return Err(Error::Config("stage 3 trains the adapters and cannot run without them".into()));
    }
    Ok(stages)
}

/// Training data for a stage: the source language for stages 1 and 2,
/// every language for stage 3 unless restricted to the source.
pub fn stage_data(cfg: &RunConfig, stage: Stage, sets: &[LanguageSet]) -> Vec<LanguageSet> {
    sets.iter()
        .filter(|s| s.lang == SOURCE_LANGUAGE || (stage == Stage::Three && !cfg.english_only_stage3))
        .cloned()
        .collect()
}

pub struct StageOutcome {
    pub report: StageReport,
    pub model: Model,
}

/// Runs `stages` in order, starting from `init` or a fresh model over the
/// vocabulary of all given records. Returns a model snapshot per stage.
pub fn train(
    cfg: &RunConfig,
    stages: &[Stage],
    records: &[SentenceRecord],
    init: Option<Model>,
    log: &mut dyn FnMut(MetricRecord),
) -> Result<Vec<StageOutcome>> {
    let mut model = match init {
        Some(m) => m,
        None => {
            let vocab = build_vocab(&[records]);
            Model::new(model_config(cfg, vocab.len()), vocab, cfg.seed)?
        }
    };
    let sets = LanguageSet::from_records(&model.vocab, records)?;
    let mut out = Vec::with_capacity(stages.len());
    for &stage in stages {
        if stage.uses_pool() && model.pool.is_none() {
            model.attach(cfg.pool())?;
        }
        let data = stage_data(cfg, stage, &sets);
        let report = train::run_stage(&mut model, &stage_config(cfg, stage), &data, log)?;
        out.push(StageOutcome {
            report,
            model: model.clone(),
        });
    }
    Ok(out)
}

pub fn slot_tuples(record: &SentenceRecord) -> Vec<SlotTuple> {
    record.tuples.iter().map(|t| SlotTuple::from_extraction(&record.tokens, t)).collect()
}

/// Tuple-match scores per language of the model's own extractions.
pub fn evaluate(model: &Model, records: &[SentenceRecord]) -> Result<BTreeMap<String, ScoreReport>> {
    let use_pool = model.pool.is_some();
    let mut per_lang: BTreeMap<String, Vec<evaluation::SentenceScore>> = BTreeMap::new();
    for r in records {
        let predicted = model.extract(&r.tokens, use_pool)?;
        let pred: Vec<SlotTuple> = predicted.iter().map(|t| SlotTuple::from_extraction(&r.tokens, t)).collect();
        per_lang
            .entry(r.lang.clone())
            .or_default()
            .push(evaluation::tuple_match_sentence(&r.id, &pred, &slot_tuples(r)));
    }
    Ok(per_lang
        .into_iter()
        .map(|(l, s)| (l, ScoreReport::from_sentences(s, false)))
        .collect())
}

/// Fact-synset scores per language of the model's extractions.
pub fn evaluate_benchmark(model: &Model, bench: &[BenchmarkRecord]) -> Result<BTreeMap<String, ScoreReport>> {
    let use_pool = model.pool.is_some();
    let mut per_lang: BTreeMap<String, Vec<evaluation::SentenceScore>> = BTreeMap::new();
    for r in bench {
        let triples: Vec<_> = model
            .extract(&r.tokens, use_pool)?
            .iter()
            .map(|t| SlotTuple::from_extraction(&r.tokens, t).triple())
            .collect();
        let gold = r.synsets.iter().map(|s| s.expand()).collect::<Result<Vec<_>>>()?;
        per_lang
            .entry(r.lang.clone())
            .or_default()
            .push(evaluation::fact_synset_sentence(&r.id, &triples, &gold));
    }
    Ok(per_lang
        .into_iter()
        .map(|(l, s)| (l, ScoreReport::from_sentences(s, true)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub rank: usize,
    pub best_k: usize,
    /// F1 per column, same order as [`SweepReport::columns`].
    pub f1: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    /// (scorer, language) per column.
    pub columns: Vec<(String, String)>,
    pub rows: Vec<SweepRow>,
}

fn score_columns(model: &Model, eval: &[SentenceRecord], bench: &[BenchmarkRecord]) -> Result<Vec<((String, String), f64)>> {
    let mut cols = Vec::new();
    for (lang, r) in evaluate(model, eval)? {
        cols.push((("TupleMatch".to_string(), lang), r.f1));
    }
    for (lang, r) in evaluate_benchmark(model, bench)? {
        cols.push((("FactSynset".to_string(), lang), r.f1));
    }
    Ok(cols)
}

/// Trains stage 3 from `base` for every (rank, k) pair and keeps the best
/// k per rank by summed F1. Ties go to the smaller k.
pub fn rank_sweep(
    cfg: &RunConfig,
    base: &Model,
    records: &[SentenceRecord],
    eval: &[SentenceRecord],
    bench: &[BenchmarkRecord],
    ranks: &[usize],
    ks: &[usize],
    progress: &mut dyn FnMut(usize, usize, f64),
) -> Result<SweepReport> {
    if base.pool.is_some() {
        return Err(Error::Config("the sweep starts from a model without adapters".into()));
    }
    let sets = LanguageSet::from_records(&base.vocab, records)?;
    let data = stage_data(cfg, Stage::Three, &sets);
    let stage = stage_config(cfg, Stage::Three);
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for &rank in ranks {
        let mut best: Option<SweepRow> = None;
        for &k in ks {
            let mut model = base.clone();
            model.attach(PoolConfig {
                rank,
                top_k: k,
                ..cfg.pool()
            })?;
            train::run_stage(&mut model, &stage, &data, &mut |_| {})?;
            let cols = score_columns(&model, eval, bench)?;
            columns = cols.iter().map(|(c, _)| c.clone()).collect();
            let f1: Vec<f64> = cols.iter().map(|(_, f)| *f).collect();
            let total = f1.iter().sum();
            progress(rank, k, total);
            if best.as_ref().is_none_or(|b| total > b.total) {
                best = Some(SweepRow { rank, best_k: k, f1, total });
            }
        }
        rows.extend(best);
    }
    Ok(SweepReport { columns, rows })
}

impl SweepReport {
    fn line(&self, label: &str, cell: impl Fn(usize) -> String, total: &str) -> String {
        let mut out = format!("{label:<18}");
        for (i, (scorer, _)) in self.columns.iter().enumerate() {
            let first = i == 0 || self.columns[i - 1].0 != *scorer;
            out.push_str(if first { "| " } else { "  " });
            out.push_str(&format!("{:>10} ", cell(i)));
        }
        out.push_str(&format!("| {total:>6}"));
        out
    }
}

/// One row per rank with its chosen k, F1 x 100 per column and the total.
impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let group = |i: usize| {
            let (scorer, _) = &self.columns[i];
            if i == 0 || self.columns[i - 1].0 != *scorer {
                scorer.clone()
            } else {
                String::new()
            }
        };
        writeln!(f, "{}", self.line("", group, "Total"))?;
        writeln!(f, "{}", self.line("", |i| self.columns[i].1.clone(), ""))?;
        for row in &self.rows {
            let label = format!("rank = {} (k={})", row.rank, row.best_k);
            let total = format!("{:.1}", row.total * 100.0);
            writeln!(f, "{}", self.line(&label, |i| format!("{:.1}", row.f1[i] * 100.0), &total))?;
        }
        Ok(())
    }
}
