//! Small post-norm transformer encoder with learned absolute positions.
//!
//! Word and position embeddings live in their own parameter groups so the
//! staged schedule can train them separately. The query and key projections
//! carry no bias, which keeps the attention-score decomposition exact.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::molora::{LayerGate, LoraExpertPool, Site, SiteKind};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::vocab::{MARKER_ID, PAD_ID};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_FF: usize = 128;
pub const DEFAULT_MAX_LEN: usize = 100;
const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    /// Longest input including the sentence-start marker.
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_size: DEFAULT_HIDDEN,
            num_layers: DEFAULT_LAYERS,
            num_heads: DEFAULT_HEADS,
            ff_size: DEFAULT_FF,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.vocab_size <= MARKER_ID || self.max_len < 2 || self.num_layers == 0 || self.ff_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One attention + feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

fn weight(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor {
    rng::normal(rng, &[d_in, d_out], (1.0 / d_in as f64).sqrt())
}

impl Block {
    pub fn create(
        prefix: &str,
        group: Group,
        hidden: usize,
        ff: usize,
        params: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut w = |name: &str, t: Tensor| params.insert(format!("{prefix}.{name}"), group, t);
        Ok(Block {
            wq: w("attn.wq", weight(rng, hidden, hidden))?,
            wk: w("attn.wk", weight(rng, hidden, hidden))?,
            wv: w("attn.wv", weight(rng, hidden, hidden))?,
            bv: w("attn.bv", Tensor::zeros(&[1, hidden]))?,
            wo: w("attn.wo", weight(rng, hidden, hidden))?,
            bo: w("attn.bo", Tensor::zeros(&[1, hidden]))?,
            ln1_g: w("ln1.g", Tensor::full(&[1, hidden], 1.0))?,
            ln1_b: w("ln1.b", Tensor::zeros(&[1, hidden]))?,
            w1: w("ffn.w1", weight(rng, hidden, ff))?,
            b1: w("ffn.b1", Tensor::zeros(&[1, ff]))?,
            w2: w("ffn.w2", weight(rng, ff, hidden))?,
            b2: w("ffn.b2", Tensor::zeros(&[1, hidden]))?,
            ln2_g: w("ln2.g", Tensor::full(&[1, hidden], 1.0))?,
            ln2_b: w("ln2.b", Tensor::zeros(&[1, hidden]))?,
        })
    }

    /// Runs the block over `x` (`[n x d]`). `keep[j] == false` masks key `j`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        heads: usize,
        keep: &[bool],
        adapters: Option<Adapters<'_>>,
    ) -> Result<Var> {
        let d = tape.value(x).cols();
        let dk = d / heads;
        let q = linear(tape, x, self.wq, None, adapters.map(|a| a.at(SiteKind::Query)))?;
        let k = linear(tape, x, self.wk, None, None)?;
        let v = linear(tape, x, self.wv, Some(self.bv), adapters.map(|a| a.at(SiteKind::Value)))?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dk, (h + 1) * dk)?;
            let kh = tape.slice_cols(k, h * dk, (h + 1) * dk)?;
            let vh = tape.slice_cols(v, h * dk, (h + 1) * dk)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
            let attn = tape.masked_softmax_rows(scores, keep)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = linear(tape, cat, self.wo, Some(self.bo), None)?;
        let res = tape.add(x, o)?;
        let x1 = layer_norm(tape, res, self.ln1_g, self.ln1_b)?;
        let f = linear(tape, x1, self.w1, Some(self.b1), adapters.map(|a| a.at(SiteKind::FfnIn)))?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, self.w2, Some(self.b2), adapters.map(|a| a.at(SiteKind::FfnOut)))?;
        let res = tape.add(x1, f)?;
        layer_norm(tape, res, self.ln2_g, self.ln2_b)
    }
}

/// Adapter context for one encoder layer.
#[derive(Clone, Copy)]
pub struct Adapters<'a> {
    pub pool: &'a LoraExpertPool,
    pub layer: usize,
    pub gate: &'a LayerGate,
}

impl<'a> Adapters<'a> {
    fn at(self, kind: SiteKind) -> (Adapters<'a>, Site) {
        (self, Site { layer: self.layer, kind })
    }
}

fn linear(
    tape: &mut Tape<'_>,
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
    adapter: Option<(Adapters<'_>, Site)>,
) -> Result<Var> {
    let wv = tape.param(w);
    let mut y = tape.matmul(x, wv)?;
    if let Some(b) = b {
        let bv = tape.param(b);
        y = tape.add_row(y, bv)?;
    }
    if let Some((ad, site)) = adapter {
        if let Some(delta) = ad.pool.delta(tape, x, site, ad.gate)? {
            y = tape.add(y, delta)?;
        }
    }
    Ok(y)
}

fn layer_norm(tape: &mut Tape<'_>, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
    let g = tape.param(g);
    let b = tape.param(b);
    tape.layer_norm(x, g, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub word: ParamId,
    pub position: ParamId,
    pub layers: Vec<Block>,
}

/// Tape nodes produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    /// Embedding output followed by each layer's output.
    pub layers: Vec<Var>,
    pub gates: Vec<LayerGate>,
}

impl EncodedVars {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding output")
    }
}

/// Plain-tensor view of an encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// `num_layers + 1` tensors of shape `[len + 1, d]`; row 0 is the marker.
    pub layers: Vec<Tensor>,
    pub gates: Vec<crate::molora::GateDecision>,
}

impl HiddenStates {
    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("at least the embedding output")
    }
}

/// The four unscaled components of a pre-softmax attention score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTerms {
    /// Word-to-word.
    pub content: Tensor,
    /// Query word to key position.
    pub content_position: Tensor,
    /// Query position to key word.
    pub position_content: Tensor,
    /// Position-to-position.
    pub position: Tensor,
}

impl ScoreTerms {
    pub fn total(&self) -> Tensor {
        let mut t = self.content.clone();
        t.add_assign(&self.content_position);
        t.add_assign(&self.position_content);
        t.add_assign(&self.position);
        t
    }
}

impl Encoder {
    pub fn create(config: EncoderConfig, params: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let mut word_init = rng::normal(rng, &[config.vocab_size, d], EMBED_INIT_STD);
        word_init.data_mut()[..d].fill(0.0);
        let word = params.insert("enc.word", Group::Word, word_init)?;
        let position = params.insert(
            "enc.position",
            Group::Position,
            rng::normal(rng, &[config.max_len, d], EMBED_INIT_STD),
        )?;
        let layers = (0..config.num_layers)
            .map(|l| Block::create(&format!("enc.l{l}"), Group::Body, d, config.ff_size, params, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config,
            word,
            position,
            layers,
        })
    }

    /// Adapter sites for a pool: query, value and both feed-forward weights
    /// of every layer, plus the embedding output when requested.
    pub fn adapter_sites(&self, embedding: bool) -> Vec<(Site, usize, usize)> {
        let d = self.config.hidden_size;
        let ff = self.config.ff_size;
        let mut sites = Vec::new();
        if embedding {
            sites.push((Site { layer: 0, kind: SiteKind::Embedding }, d, d));
        }
        for layer in 0..self.config.num_layers {
            sites.push((Site { layer, kind: SiteKind::Query }, d, d));
            sites.push((Site { layer, kind: SiteKind::Value }, d, d));
            sites.push((Site { layer, kind: SiteKind::FfnIn }, d, ff));
            sites.push((Site { layer, kind: SiteKind::FfnOut }, ff, d));
        }
        sites
    }

    /// Marker-prefixed ids, validated against vocabulary and length limits.
    pub fn input_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if ids.len() + 1 > self.config.max_len {
            return Err(Error::Invalid(format!(
                "sentence of {} tokens exceeds the limit of {}",
                ids.len(),
                self.config.max_len - 1
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let mut full = Vec::with_capacity(ids.len() + 1);
        full.push(MARKER_ID);
        full.extend_from_slice(ids);
        Ok(full)
    }

    fn embed(&self, tape: &mut Tape<'_>, full: &[usize]) -> Result<Var> {
        let word = tape.param(self.word);
        let w = tape.embedding(word, full)?;
        let pos = tape.param(self.position);
        let positions: Vec<usize> = (0..full.len()).collect();
        let p = tape.embedding(pos, &positions)?;
        tape.add(w, p)
    }

    /// Encodes sentence token ids (without the marker). Padding ids are
    /// masked out as attention keys.
    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize], pool: Option<&LoraExpertPool>) -> Result<EncodedVars> {
        let full = self.input_ids(ids)?;
        let keep: Vec<bool> = full.iter().map(|&t| t != PAD_ID).collect();
        let mut x = self.embed(tape, &full)?;
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        let mut gates = Vec::new();
        let mut pending = None;
        if let Some(pool) = pool {
            let e = tape.slice_rows(x, 0, 1)?;
            let g0 = pool.gate_layer(tape, 0, e)?;
            let emb = Site { layer: 0, kind: SiteKind::Embedding };
            if let Some(delta) = pool.delta(tape, x, emb, &g0)? {
                x = tape.add(x, delta)?;
            }
            pending = Some(g0);
        }
        layers.push(x);
        for (l, block) in self.layers.iter().enumerate() {
            let gate = match (pool, pending.take()) {
                (Some(_), Some(g)) => Some(g),
                (Some(pool), None) => {
                    let e = tape.slice_rows(x, 0, 1)?;
                    Some(pool.gate_layer(tape, l, e)?)
                }
                _ => None,
            };
            let adapters = match (pool, &gate) {
                (Some(pool), Some(gate)) => Some(Adapters { pool, layer: l, gate }),
                _ => None,
            };
            x = block.forward(tape, x, self.config.num_heads, &keep, adapters)?;
            layers.push(x);
            gates.extend(gate);
        }
        Ok(EncodedVars { layers, gates })
    }

    pub fn encode(&self, params: &ParamStore, ids: &[usize], pool: Option<&LoraExpertPool>) -> Result<HiddenStates> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, ids, pool)?;
        Ok(HiddenStates {
            layers: out.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            gates: out.gates.into_iter().map(|g| g.decision).collect(),
        })
    }

    /// Splits the pre-softmax scores `Q Kᵀ` of `layer`/`head`, computed from
    /// word+position inputs, into word/position components.
    pub fn score_terms(&self, params: &ParamStore, layer: usize, head: usize, ids: &[usize]) -> Result<ScoreTerms> {
        let block = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range")))?;
        if head >= self.config.num_heads {
            return Err(Error::Invalid(format!("head {head} out of range")));
        }
        let full = self.input_ids(ids)?;
        let d = self.config.hidden_size;
        let dk = self.config.head_dim();
        let word_rows: Vec<Vec<f64>> = full.iter().map(|&t| params.value(self.word).row(t).to_vec()).collect();
        let pos_rows: Vec<Vec<f64>> = (0..full.len()).map(|i| params.value(self.position).row(i).to_vec()).collect();
        let words = Tensor::from_rows(&word_rows)?;
        let positions = Tensor::from_rows(&pos_rows)?;
        debug_assert_eq!(words.cols(), d);
        let head_cols = |w: &Tensor| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = (0..w.rows()).map(|r| w.row(r)[head * dk..(head + 1) * dk].to_vec()).collect();
            Tensor::from_rows(&rows)
        };
        let wq = head_cols(params.value(block.wq))?;
        let wk = head_cols(params.value(block.wk))?;
        let (hq, hk) = (words.matmul(&wq)?, words.matmul(&wk)?);
        let (pq, pk) = (positions.matmul(&wq)?, positions.matmul(&wk)?);
        Ok(ScoreTerms {
            content: hq.matmul_nt(&hk)?,
            content_position: hq.matmul_nt(&pk)?,
            position_content: pq.matmul_nt(&hk)?,
            position: pq.matmul_nt(&pk)?,
        })
    }

    /// Attention probabilities of `layer` for a sentence, one `[n x n]`
    /// tensor per head.
    pub fn attention_weights(
        &self,
        params: &ParamStore,
        ids: &[usize],
        layer: usize,
    ) -> Result<Vec<Tensor>> {
        if layer >= self.layers.len() {
            return Err(Error::Invalid(format!("layer {layer} out of range")));
        }
        let hidden = self.encode(params, ids, None)?;
        let x = &hidden.layers[layer];
        let full = self.input_ids(ids)?;
        let keep: Vec<bool> = full.iter().map(|&t| t != PAD_ID).collect();
        let block = &self.layers[layer];
        let dk = self.config.head_dim();
        let mut tape = Tape::new(params);
        let xv = tape.constant(x.clone())?;
        let wq = tape.param(block.wq);
        let wk = tape.param(block.wk);
        let q = tape.matmul(xv, wq)?;
        let k = tape.matmul(xv, wk)?;
        let mut out = Vec::new();
        for h in 0..self.config.num_heads {
            let qh = tape.slice_cols(q, h * dk, (h + 1) * dk)?;
            let kh = tape.slice_cols(k, h * dk, (h + 1) * dk)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dk as f64).sqrt())?;
            let a = tape.masked_softmax_rows(s, &keep)?;
            out.push(tape.value(a).clone());
        }
        Ok(out)
    }
}
