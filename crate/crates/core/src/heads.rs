//! Predicate tagging head and per-predicate argument extractor.

use crate::autodiff::{Tape, Var};
use crate::bio::{Span, NUM_ARGUMENT_TAGS, NUM_PREDICATE_TAGS};
use crate::encoder::Block;
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_ARG_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub pred_w1: ParamId,
    pub pred_b1: ParamId,
    pub pred_w2: ParamId,
    pub pred_b2: ParamId,
    pub arg_blocks: Vec<Block>,
    pub arg_w: ParamId,
    pub arg_b: ParamId,
    pub num_heads: usize,
}

impl Heads {
    pub fn create(
        hidden: usize,
        ff: usize,
        num_heads: usize,
        arg_blocks: usize,
        params: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let g = Group::Classifier;
        let std = (1.0 / hidden as f64).sqrt();
        let pred_w1 = params.insert("head.pred.w1", g, rng::normal(rng, &[hidden, hidden], std))?;
        let pred_b1 = params.insert("head.pred.b1", g, Tensor::zeros(&[1, hidden]))?;
        let pred_w2 = params.insert("head.pred.w2", g, rng::normal(rng, &[hidden, NUM_PREDICATE_TAGS], std))?;
        let pred_b2 = params.insert("head.pred.b2", g, Tensor::zeros(&[1, NUM_PREDICATE_TAGS]))?;
        let blocks = (0..arg_blocks)
            .map(|i| Block::create(&format!("head.arg.l{i}"), g, hidden, ff, params, rng))
            .collect::<Result<_>>()?;
        let arg_w = params.insert("head.arg.w", g, rng::normal(rng, &[hidden, NUM_ARGUMENT_TAGS], std))?;
        let arg_b = params.insert("head.arg.b", g, Tensor::zeros(&[1, NUM_ARGUMENT_TAGS]))?;
        Ok(Heads {
            pred_w1,
            pred_b1,
            pred_w2,
            pred_b2,
            arg_blocks: blocks,
            arg_w,
            arg_b,
            num_heads,
        })
    }

    /// Per-token predicate-tag logits `[n x 3]` from token states `[n x d]`.
    pub fn predicate_logits(&self, tape: &mut Tape<'_>, tokens: Var) -> Result<Var> {
        let w1 = tape.param(self.pred_w1);
        let b1 = tape.param(self.pred_b1);
        let w2 = tape.param(self.pred_w2);
        let b2 = tape.param(self.pred_b2);
        let h = tape.matmul(tokens, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, w2)?;
        tape.add_row(out, b2)
    }

    /// Mean token state over `pred`, shape `[1 x d]`.
    pub fn predicate_summary(&self, tape: &mut Tape<'_>, tokens: Var, pred: Span) -> Result<Var> {
        let n = tape.value(tokens).rows();
        if pred.is_empty() {
            return Err(Error::Invalid("empty predicate span".into()));
        }
        pred.check(n)?;
        let rows = tape.slice_rows(tokens, pred.start, pred.end)?;
        tape.mean(rows, 0)
    }

    /// Per-token argument-tag logits `[n x 9]` for one predicate.
    pub fn argument_logits(&self, tape: &mut Tape<'_>, tokens: Var, pred: Span) -> Result<Var> {
        let summary = self.predicate_summary(tape, tokens, pred)?;
        let n = tape.value(tokens).rows();
        let keep = vec![true; n];
        let mut x = tape.add_row(tokens, summary)?;
        for block in &self.arg_blocks {
            x = block.forward(tape, x, self.num_heads, &keep, None)?;
        }
        let w = tape.param(self.arg_w);
        let b = tape.param(self.arg_b);
        let out = tape.matmul(x, w)?;
        tape.add_row(out, b)
    }
}
