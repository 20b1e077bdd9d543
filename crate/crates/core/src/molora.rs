//! Mixture-of-LoRAs: pools of low-rank adapters per attachment site, a gate
//! per encoder layer that scores experts from the sentence-start hidden
//! state, deterministic top-k selection and weighted combination.
//!
//! An adapter maps `h` (`[n x d_in]`) to `h · Aᵀ · Bᵀ` scaled by
//! `alpha / rank`, with `A: [rank x d_in]` (down-projection) and
//! `B: [d_out x rank]` (up-projection). `B` starts at zero, so a freshly
//! attached pool leaves every output unchanged.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_EXPERTS: usize = 6;
pub const DEFAULT_RANK: usize = 64;
pub const DEFAULT_TOP_K: usize = 4;
pub const DEFAULT_ALPHA: f64 = 16.0;
const A_INIT_STD: f64 = 0.02;
const GATE_INIT_STD: f64 = 0.02;

/// Which weight of a layer an adapter pool is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    /// Summed word+position embedding, before the first layer.
    Embedding,
    Query,
    Value,
    FfnIn,
    FfnOut,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Embedding => "emb",
            SiteKind::Query => "q",
            SiteKind::Value => "v",
            SiteKind::FfnIn => "ffn1",
            SiteKind::FfnOut => "ffn2",
        }
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SiteKind::Embedding, SiteKind::Query, SiteKind::Value, SiteKind::FfnIn, SiteKind::FfnOut]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter site `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}", self.layer, self.kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolConfig {
    pub experts: usize,
    pub rank: usize,
    pub top_k: usize,
    pub alpha: f64,
    /// Also adapt the embedding output (attached to layer 0's gate).
    pub embedding_site: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            experts: DEFAULT_EXPERTS,
            rank: DEFAULT_RANK,
            top_k: DEFAULT_TOP_K,
            alpha: DEFAULT_ALPHA,
            embedding_site: false,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("expert pool must hold at least one adapter".into()));
        }
        check_top_k(self.top_k, self.experts)?;
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("adapter scaling must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier applied to every `B·A·h` term.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn check_top_k(k: usize, experts: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::Config(format!("top-k must be in 1..={experts}, got {k}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SitePool {
    pub site: Site,
    pub d_in: usize,
    pub d_out: usize,
    pub experts: Vec<LoraAdapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpertPool {
    pub config: PoolConfig,
    pub sites: Vec<SitePool>,
    /// Gate projection `[d x experts]` for each encoder layer.
    pub gates: Vec<ParamId>,
}

/// Outcome of scoring the experts for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Softmax over all experts.
    pub weights: Vec<f64>,
    /// Chosen experts, highest weight first.
    pub selected: Vec<usize>,
    /// Weights of the chosen experts rescaled to sum to one.
    pub selected_weights: Vec<f64>,
}

/// Indices of the `k` largest values; equal values prefer the lower index.
pub fn top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Scores experts for a gate feature `e` (`[1 x d]`) with gate matrix
/// `w_a` (`[d x T]`).
pub fn gate(e: &Tensor, w_a: &Tensor, k: usize) -> Result<GateDecision> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let e = tape.constant(e.clone())?;
    let w = tape.constant(w_a.clone())?;
    Ok(gate_on_tape(&mut tape, e, w, k)?.0)
}

/// Tape-recorded gate. Returns the decision and a `[1 x k]` node holding the
/// renormalized selected weights, through which gradients reach the gate.
pub fn gate_on_tape(tape: &mut Tape<'_>, e: Var, w_a: Var, k: usize) -> Result<(GateDecision, Var)> {
    let experts = tape.value(w_a).cols();
    check_top_k(k, experts)?;
    let (rows, _) = tape.value(e).dims2("gate")?;
    if rows != 1 {
        return Err(Error::shape("gate", format!("gate feature must be one row, got {rows}")));
    }
    let logits = tape.matmul(e, w_a)?;
    let probs = tape.softmax(logits, 1)?;
    let weights = tape.value(probs).data().to_vec();
    let selected = top_k(&weights, k);
    let picked = tape.select_cols(probs, &selected)?;
    let renorm = tape.normalize(picked)?;
    let selected_weights = tape.value(renorm).data().to_vec();
    Ok((
        GateDecision {
            weights,
            selected,
            selected_weights,
        },
        renorm,
    ))
}

impl LoraExpertPool {
    /// Creates pools for the given sites, drawing `A` and gate weights from
    /// `rng`. `dims` gives `(d_in, d_out)` for each site.
    pub fn create(
        config: PoolConfig,
        sites: &[(Site, usize, usize)],
        num_layers: usize,
        hidden: usize,
        params: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut pools = Vec::with_capacity(sites.len());
        for &(site, d_in, d_out) in sites {
            if pools.iter().any(|p: &SitePool| p.site == site) {
                return Err(Error::Config(format!("adapter site {site} listed twice")));
            }
            let mut experts = Vec::with_capacity(config.experts);
            for t in 0..config.experts {
                let a = params.insert(
                    format!("pool.{site}.e{t}.a"),
                    Group::Lora,
                    rng::normal(rng, &[config.rank, d_in], A_INIT_STD),
                )?;
                let b = params.insert(
                    format!("pool.{site}.e{t}.b"),
                    Group::Lora,
                    Tensor::zeros(&[d_out, config.rank]),
                )?;
                experts.push(LoraAdapter { a, b });
            }
            pools.push(SitePool {
                site,
                d_in,
                d_out,
                experts,
            });
        }
        let mut gates = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            gates.push(params.insert(
                format!("pool.l{l}.gate"),
                Group::Gate,
                rng::normal(rng, &[hidden, config.experts], GATE_INIT_STD),
            )?);
        }
        Ok(LoraExpertPool {
            config,
            sites: pools,
            gates,
        })
    }

    pub fn site(&self, site: Site) -> Option<&SitePool> {
        self.sites.iter().find(|p| p.site == site)
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    /// Overrides the number of experts used at inference.
    pub fn set_top_k(&mut self, k: usize) -> Result<()> {
        check_top_k(k, self.config.experts)?;
        self.config.top_k = k;
        Ok(())
    }

    /// Scores the experts of `layer` from its sentence-start state `e`.
    pub fn gate_layer(&self, tape: &mut Tape<'_>, layer: usize, e: Var) -> Result<LayerGate> {
        let w = *self
            .gates
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("no gate for layer {layer}")))?;
        let w = tape.param(w);
        let (decision, weights) = gate_on_tape(tape, e, w, self.config.top_k)?;
        Ok(LayerGate { decision, weights })
    }

    /// `Σ_t g_t · (alpha/rank) · B_t A_t h` over the selected experts.
    pub fn delta(&self, tape: &mut Tape<'_>, h: Var, site: Site, gate: &LayerGate) -> Result<Option<Var>> {
        let Some(pool) = self.site(site) else {
            return Ok(None);
        };
        let (_, d_in) = tape.value(h).dims2("lora")?;
        if d_in != pool.d_in {
            return Err(Error::shape("lora", format!("site {site} expects width {}, got {d_in}", pool.d_in)));
        }
        let scaling = self.config.scaling();
        let mut acc: Option<Var> = None;
        for (slot, &t) in gate.decision.selected.iter().enumerate() {
            let expert = &pool.experts[t];
            let a = tape.param(expert.a);
            let b = tape.param(expert.b);
            let down = tape.matmul_nt(h, a)?;
            let up = tape.matmul_nt(down, b)?;
            let g = tape.select_cols(gate.weights, &[slot])?;
            let weighted = tape.scale_by(up, g)?;
            acc = Some(match acc {
                None => weighted,
                Some(prev) => tape.add(prev, weighted)?,
            });
        }
        match acc {
            Some(sum) => Ok(Some(tape.scale(sum, scaling)?)),
            None => Ok(None),
        }
    }

    /// `h + delta(h)` for a site whose input and output widths agree.
    pub fn apply(&self, tape: &mut Tape<'_>, h: Var, site: Site, gate: &LayerGate) -> Result<Var> {
        match self.delta(tape, h, site, gate)? {
            Some(d) => tape.add(h, d),
            None => Err(Error::Invalid(format!("no adapter pool attached at {site}"))),
        }
    }
}

/// Gate decision of one layer plus its tape node.
#[derive(Clone, Debug)]
pub struct LayerGate {
    pub decision: GateDecision,
    pub weights: Var,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_t_keeps_order_and_weights() {
        // logits [0, ln 3] -> softmax [0.25, 0.75]
        let e = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let d = gate(&e, &w, 2).unwrap();
        assert_eq!(d.selected, vec![1, 0]);
        assert!((d.weights[0] - 0.25).abs() < 1e-15);
        assert!((d.selected_weights[0] - 0.75).abs() < 1e-15);
        assert!((d.selected_weights[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let e = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let w = Tensor::zeros(&[2, 4]);
        let d = gate(&e, &w, 1).unwrap();
        assert_eq!(d.selected, vec![0]);
        assert_eq!(d.selected_weights, vec![1.0]);
    }

    #[test]
    fn k_larger_than_pool_is_config_error() {
        let e = Tensor::zeros(&[1, 2]);
        let w = Tensor::zeros(&[2, 3]);
        assert!(matches!(gate(&e, &w, 4), Err(Error::Config(_))));
        assert!(matches!(gate(&e, &w, 0), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_orders_by_weight() {
        assert_eq!(top_k(&[0.1, 0.4, 0.2, 0.4], 3), vec![1, 3, 2]);
    }
}
