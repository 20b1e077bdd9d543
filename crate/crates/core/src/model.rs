//! The full tagger: encoder, optional adapter pool and extraction heads.

use crate::autodiff::{Tape, Var};
use crate::bio::{self, ExtractionTuple, Role, Span, TagScheme, TagSet};
use crate::encoder::{Encoder, EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::heads::{Heads, DEFAULT_ARG_BLOCKS};
use crate::molora::{LoraExpertPool, PoolConfig};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Attention blocks in the argument extractor.
    pub arg_blocks: usize,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::with_vocab(vocab_size),
            arg_blocks: DEFAULT_ARG_BLOCKS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub scheme: TagScheme,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub heads: Heads,
    pub pool: Option<LoraExpertPool>,
    pub rng: Rng,
    /// Stages that produced these weights, oldest first.
    pub provenance: Vec<String>,
}

/// Gold targets for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub ids: Vec<usize>,
    pub predicate_tags: Vec<usize>,
    /// Gold predicate span and argument tags for every tuple.
    pub arguments: Vec<(Span, Vec<usize>)>,
}

impl TrainingExample {
    pub fn new<S: AsRef<str>>(vocab: &Vocab, tokens: &[S], tuples: &[ExtractionTuple]) -> Result<Self> {
        let n = tokens.len();
        let predicate_tags = bio::predicate_target(n, tuples)?;
        let (_, arg_tags) = bio::encode_tags(n, tuples)?;
        Ok(TrainingExample {
            ids: vocab.ids(tokens),
            predicate_tags,
            arguments: tuples.iter().map(|t| t.predicate).zip(arg_tags).collect(),
        })
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocabulary size {} does not match vocabulary of {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::create(config.encoder.clone(), &mut params, &mut rng)?;
        let e = &config.encoder;
        let heads = Heads::create(e.hidden_size, e.ff_size, e.num_heads, config.arg_blocks, &mut params, &mut rng)?;
        Ok(Model {
            config,
            vocab,
            scheme: TagScheme::default(),
            params,
            encoder,
            heads,
            pool: None,
            rng,
            provenance: Vec::new(),
        })
    }

    /// Attaches a fresh adapter pool. A model carries at most one pool.
    pub fn attach(&mut self, config: PoolConfig) -> Result<()> {
        if self.pool.is_some() {
            return Err(Error::Config("an adapter pool is already attached".into()));
        }
        let sites = self.encoder.adapter_sites(config.embedding_site);
        let e = &self.config.encoder;
        let pool = LoraExpertPool::create(config, &sites, e.num_layers, e.hidden_size, &mut self.params, &mut self.rng)?;
        self.pool = Some(pool);
        Ok(())
    }

    fn active_pool(&self, use_pool: bool) -> Option<&LoraExpertPool> {
        if use_pool {
            self.pool.as_ref()
        } else {
            None
        }
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.ids(tokens)
    }

    pub fn encode(&self, ids: &[usize], use_pool: bool) -> Result<HiddenStates> {
        self.encoder.encode(&self.params, ids, self.active_pool(use_pool))
    }

    /// Final token states without the marker row, `[n x d]`.
    fn token_states(&self, tape: &mut Tape<'_>, ids: &[usize], use_pool: bool) -> Result<Var> {
        let enc = self.encoder.forward(tape, ids, self.active_pool(use_pool))?;
        tape.slice_rows(enc.last(), 1, ids.len() + 1)
    }

    pub fn predicate_logits(&self, ids: &[usize], use_pool: bool) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let h = self.token_states(&mut tape, ids, use_pool)?;
        let out = self.heads.predicate_logits(&mut tape, h)?;
        Ok(tape.value(out).clone())
    }

    pub fn argument_logits(&self, ids: &[usize], pred: Span, use_pool: bool) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let h = self.token_states(&mut tape, ids, use_pool)?;
        let out = self.heads.argument_logits(&mut tape, h, pred)?;
        Ok(tape.value(out).clone())
    }

    /// Predicts tuples for a tokenized sentence: greedy predicate tags, then
    /// greedy argument tags for each predicted predicate. Predicates without
    /// arguments yield no tuple.
    pub fn extract<S: AsRef<str>>(&self, tokens: &[S], use_pool: bool) -> Result<Vec<ExtractionTuple>> {
        self.extract_ids(&self.ids(tokens), use_pool)
    }

    pub fn extract_ids(&self, ids: &[usize], use_pool: bool) -> Result<Vec<ExtractionTuple>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params);
        let h = self.token_states(&mut tape, ids, use_pool)?;
        let pred_logits = self.heads.predicate_logits(&mut tape, h)?;
        let pred_tags = tape.value(pred_logits).argmax_rows();
        let mut tuples = Vec::new();
        for (role, span) in bio::decode_bio(TagSet::Predicate, &pred_tags)? {
            debug_assert_eq!(role, Role::Predicate);
            let logits = self.heads.argument_logits(&mut tape, h, span)?;
            let arg_tags = tape.value(logits).argmax_rows();
            if let Some(t) = bio::assemble_tuple(span, &arg_tags)? {
                tuples.push(t);
            }
        }
        Ok(tuples)
    }

    /// Predicate loss plus mean argument loss over gold tuples, with gold
    /// predicate spans fed to the argument extractor.
    pub fn loss(&self, tape: &mut Tape<'_>, example: &TrainingExample, use_pool: bool) -> Result<Var> {
        let n = example.ids.len();
        if n == 0 {
            return Err(Error::Invalid("cannot train on an empty sentence".into()));
        }
        let mask = vec![true; n];
        let h = self.token_states(tape, &example.ids, use_pool)?;
        let pred_logits = self.heads.predicate_logits(tape, h)?;
        let mut loss = tape.cross_entropy(pred_logits, &example.predicate_tags, &mask)?;
        if !example.arguments.is_empty() {
            let mut arg_total: Option<Var> = None;
            for (span, tags) in &example.arguments {
                let logits = self.heads.argument_logits(tape, h, *span)?;
                let l = tape.cross_entropy(logits, tags, &mask)?;
                arg_total = Some(match arg_total {
                    None => l,
                    Some(prev) => tape.add(prev, l)?,
                });
            }
            let arg = tape.scale(arg_total.expect("non-empty"), 1.0 / example.arguments.len() as f64)?;
            loss = tape.add(loss, arg)?;
        }
        Ok(loss)
    }

    /// Loss value without gradients.
    pub fn loss_value(&self, example: &TrainingExample, use_pool: bool) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let l = self.loss(&mut tape, example, use_pool)?;
        Ok(tape.value(l).item())
    }
}
