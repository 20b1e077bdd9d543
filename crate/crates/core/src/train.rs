//! The three-stage tuning schedule.
//!
//! | stage | trainable groups                | data                       |
//! |-------|---------------------------------|----------------------------|
//! | 1     | word embedding, heads           | source language            |
//! | 2     | position embedding, body, heads | source language            |
//! | 3     | adapters, gates                 | every language, 1/K each   |
//!
//! Optimizer state starts fresh at every stage.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{self, SentenceRecord};
use crate::error::{Error, Result};
use crate::model::{Model, TrainingExample};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Group;
use crate::rng;
use crate::vocab::Vocab;

pub const DEFAULT_LEARNING_RATE: f64 = 3e-5;
pub const DEFAULT_EPOCHS: usize = 1;
pub const DEFAULT_BATCH: [usize; 3] = [128, 128, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Config(format!("no stage {n}"))),
        }
    }

    pub fn groups(self) -> &'static [Group] {
        match self {
            Stage::One => &[Group::Word, Group::Classifier],
            Stage::Two => &[Group::Position, Group::Body, Group::Classifier],
            Stage::Three => &[Group::Lora, Group::Gate],
        }
    }

    pub fn uses_pool(self) -> bool {
        self == Stage::Three
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Sentences per optimizer step. In stage 3 the step draws an equal
    /// share from every language.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        StageConfig {
            stage,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH[stage.number() as usize - 1],
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Training examples of one language.
#[derive(Clone, Debug)]
pub struct LanguageSet {
    pub lang: String,
    pub examples: Vec<TrainingExample>,
}

impl LanguageSet {
    /// Groups corpus records by language, in language-code order.
    pub fn from_records(vocab: &Vocab, records: &[SentenceRecord]) -> Result<Vec<LanguageSet>> {
        corpus::by_language(records)
            .into_iter()
            .map(|(lang, recs)| {
                let examples = recs
                    .iter()
                    .map(|r| TrainingExample::new(vocab, &r.tokens, &r.tuples))
                    .collect::<Result<_>>()?;
                Ok(LanguageSet {
                    lang: lang.to_string(),
                    examples,
                })
            })
            .collect()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    /// Language code, or `"all"` for step and epoch aggregates.
    pub language: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Deterministic per-(seed, language, epoch) stream so that batch order
/// does not depend on the order languages are listed in.
fn order_seed(seed: u64, lang: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in lang.bytes().chain(epoch.to_le_bytes()).chain(seed.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Runs one stage in place. Stages 1 and 2 pool all languages given into a
/// single stream; stage 3 requires an attached adapter pool.
pub fn run_stage(
    model: &mut Model,
    cfg: &StageConfig,
    data: &[LanguageSet],
    log: &mut dyn FnMut(MetricRecord),
) -> Result<StageReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    if data.iter().all(|l| l.examples.is_empty()) {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    if cfg.stage.uses_pool() && model.pool.is_none() {
        return Err(Error::Config("stage 3 needs an attached adapter pool".into()));
    }
    let sets: Vec<LanguageSet> = if cfg.stage.uses_pool() {
        data.iter().filter(|l| !l.examples.is_empty()).cloned().collect()
    } else {
        vec![LanguageSet {
            lang: "all".into(),
            examples: data.iter().flat_map(|l| l.examples.iter().cloned()).collect(),
        }]
    };
    let k = sets.len();
    let per_lang_batch = (cfg.batch_size / k).max(1);

    model.params.set_trainable_groups(cfg.stage.groups());
    model.params.zero_grads();
    let mut opt = AdamW::new(cfg.optimizer);
    let use_pool = cfg.stage.uses_pool();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let orders: Vec<Vec<usize>> = sets
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..s.examples.len()).collect();
                idx.shuffle(&mut rng::seeded(order_seed(cfg.seed, &s.lang, epoch)));
                idx
            })
            .collect();
        let steps = sets
            .iter()
            .map(|s| s.examples.len().div_ceil(per_lang_batch))
            .max()
            .unwrap_or(0);
        let mut epoch_total = 0.0;
        for s in 0..steps {
            let mut step_loss = 0.0;
            for (set, order) in sets.iter().zip(&orders) {
                let n = order.len();
                // Languages with fewer batches wrap around their own order.
                let start = (s * per_lang_batch) % n;
                let batch: Vec<usize> = if k == 1 {
                    order[s * per_lang_batch..((s + 1) * per_lang_batch).min(n)].to_vec()
                } else {
                    (0..per_lang_batch.min(n)).map(|j| order[(start + j) % n]).collect()
                };
                let weight = 1.0 / (k as f64 * batch.len() as f64);
                let mut lang_loss = 0.0;
                for &i in &batch {
                    let grads = {
                        let mut tape = Tape::new(&model.params);
                        let loss = model.loss(&mut tape, &set.examples[i], use_pool)?;
                        lang_loss += tape.value(loss).item();
                        tape.backward(loss)?
                    };
                    model.params.accumulate(&grads, weight);
                }
                lang_loss /= batch.len() as f64;
                if k > 1 {
                    log(MetricRecord {
                        stage: cfg.stage.number(),
                        epoch,
                        step,
                        language: set.lang.clone(),
                        loss: lang_loss,
                    });
                }
                step_loss += lang_loss / k as f64;
            }
            opt.step(&mut model.params, cfg.learning_rate);
            model.params.zero_grads();
            log(MetricRecord {
                stage: cfg.stage.number(),
                epoch,
                step,
                language: "all".into(),
                loss: step_loss,
            });
            epoch_total += step_loss;
            step += 1;
        }
        epoch_losses.push(epoch_total / steps as f64);
    }
    model.provenance.push(cfg.stage.to_string());
    Ok(StageReport {
        stage: cfg.stage,
        epoch_losses,
        steps: step,
    })
}

/// `(1/K) Σ_languages mean loss` at the current weights.
pub fn multilingual_loss(model: &Model, data: &[LanguageSet], use_pool: bool) -> Result<f64> {
    let sets: Vec<&LanguageSet> = data.iter().filter(|l| !l.examples.is_empty()).collect();
    if sets.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let mut total = 0.0;
    for set in &sets {
        let mut s = 0.0;
        for ex in &set.examples {
            s += model.loss_value(ex, use_pool)?;
        }
        total += s / set.examples.len() as f64;
    }
    Ok(total / sets.len() as f64)
}
