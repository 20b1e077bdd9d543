//! Tuple scoring: token-level tuple matching and fact-synset exact match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bio::ExtractionTuple;
use crate::error::{Error, Result};

/// A subject, relation, object triple of surface strings.
pub type Triple = [String; 3];

/// Lowercases and collapses runs of whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalize_triple(t: &Triple) -> Triple {
    [normalize(&t[0]), normalize(&t[1]), normalize(&t[2])]
}

enum Piece<'a> {
    Fixed(&'a str),
    Optional(&'a str),
}

fn pieces(text: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        match rest.find(['[', ']']) {
            None => {
                out.push(Piece::Fixed(rest));
                break;
            }
            Some(i) if rest.as_bytes()[i] == b']' => {
                return Err(Error::data("optional marker", format!("unmatched ']' in {text:?}")));
            }
            Some(i) => {
                out.push(Piece::Fixed(&rest[..i]));
                let inner = &rest[i + 1..];
                let close = inner
                    .find(['[', ']'])
                    .ok_or_else(|| Error::data("optional marker", format!("unclosed '[' in {text:?}")))?;
                if inner.as_bytes()[close] == b'[' {
                    return Err(Error::data("optional marker", format!("nested '[' in {text:?}")));
                }
                out.push(Piece::Optional(&inner[..close]));
                rest = &inner[close + 1..];
            }
        }
    }
    Ok(out)
}

/// Every concrete form of a string with `[optional]` groups, normalized.
pub fn expand_text(text: &str) -> Result<BTreeSet<String>> {
    let pieces = pieces(text)?;
    let optional = pieces.iter().filter(|p| matches!(p, Piece::Optional(_))).count();
    if optional > 20 {
        return Err(Error::data("optional marker", format!("too many optional groups in {text:?}")));
    }
    let mut forms = BTreeSet::new();
    for mask in 0u32..(1 << optional) {
        let mut s = String::new();
        let mut bit = 0;
        for p in &pieces {
            match p {
                Piece::Fixed(f) => s.push_str(f),
                Piece::Optional(o) => {
                    if mask & (1 << bit) != 0 {
                        s.push(' ');
                        s.push_str(o);
                        s.push(' ');
                    }
                    bit += 1;
                }
            }
        }
        forms.insert(normalize(&s));
    }
    Ok(forms)
}

/// Cartesian expansion of the optional groups of every slot.
pub fn expand_optional(triple: &Triple) -> Result<BTreeSet<Triple>> {
    let slots = [expand_text(&triple[0])?, expand_text(&triple[1])?, expand_text(&triple[2])?];
    let mut out = BTreeSet::new();
    for s in &slots[0] {
        for r in &slots[1] {
            for o in &slots[2] {
                out.insert([s.clone(), r.clone(), o.clone()]);
            }
        }
    }
    Ok(out)
}

/// The acceptable surface forms of one fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactSynset(pub Vec<Triple>);

impl FactSynset {
    pub fn expand(&self) -> Result<BTreeSet<Triple>> {
        if self.0.is_empty() {
            return Err(Error::data("fact synset", "no triples"));
        }
        let mut out = BTreeSet::new();
        for t in &self.0 {
            out.extend(expand_optional(t)?);
        }
        Ok(out)
    }
}

/// One sentence of a gold benchmark file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub lang: String,
    pub tokens: Vec<String>,
    pub synsets: Vec<FactSynset>,
}

/// Tuple text split into whitespace tokens per slot: the predicate first,
/// then the arguments in role order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotTuple {
    pub slots: Vec<Vec<String>>,
}

impl SlotTuple {
    pub fn new<S: AsRef<str>>(predicate: &str, arguments: &[S]) -> Self {
        let tok = |s: &str| s.split_whitespace().map(str::to_string).collect();
        let mut slots = vec![tok(predicate)];
        slots.extend(arguments.iter().map(|a| tok(a.as_ref())));
        SlotTuple { slots }
    }

    pub fn from_extraction<S: AsRef<str>>(tokens: &[S], t: &ExtractionTuple) -> Self {
        let words = |s: crate::bio::Span| tokens[s.start..s.end].iter().map(|w| w.as_ref().to_string()).collect();
        let mut slots = vec![words(t.predicate)];
        slots.extend(t.arguments.iter().map(|&a| words(a)));
        SlotTuple { slots }
    }

    /// Subject, relation and object, with arguments past the second joined
    /// onto the object.
    pub fn triple(&self) -> Triple {
        let join = |s: &[String]| s.join(" ");
        let subject = self.slots.get(1).map(|s| join(s)).unwrap_or_default();
        let object = self.slots.get(2..).unwrap_or(&[]).iter().map(|s| join(s)).collect::<Vec<_>>().join(" ");
        [subject, join(&self.slots[0]), object]
    }
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in b {
        *counts.entry(t).or_default() += 1;
    }
    a.iter()
        .filter(|t| match counts.get_mut(t.as_str()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

fn ratio(num: usize, den: usize, other: usize) -> f64 {
    match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => num as f64 / den as f64,
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Slot-wise token scores of a predicted tuple against a gold tuple,
/// macro-averaged over slots. Slots present on one side only score zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn pair_score(pred: &SlotTuple, gold: &SlotTuple) -> PairScore {
    let (np, ng) = (pred.slots.len(), gold.slots.len());
    let empty = Vec::new();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for i in 0..np.max(ng) {
        let a = pred.slots.get(i);
        let b = gold.slots.get(i);
        let (a_toks, b_toks) = (a.unwrap_or(&empty), b.unwrap_or(&empty));
        let hit = overlap(a_toks, b_toks);
        let sp = ratio(hit, a_toks.len(), b_toks.len());
        let sr = ratio(hit, b_toks.len(), a_toks.len());
        if a.is_some() {
            p += sp;
        }
        if b.is_some() {
            r += sr;
        }
        if a.is_some() && b.is_some() {
            f += f1(sp, sr);
        }
    }
    PairScore {
        precision: p / np.max(1) as f64,
        recall: r / ng.max(1) as f64,
        f1: f / np.max(ng).max(1) as f64,
    }
}

const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Objective {
    f1: f64,
    precision: f64,
    recall: f64,
}

impl Objective {
    fn plus(self, s: PairScore) -> Self {
        Objective {
            f1: self.f1 + s.f1,
            precision: self.precision + s.precision,
            recall: self.recall + s.recall,
        }
    }

    fn beats(self, other: Objective) -> bool {
        for (a, b) in [(self.f1, other.f1), (self.precision, other.precision), (self.recall, other.recall)] {
            if a > b + EPS {
                return true;
            }
            if a < b - EPS {
                return false;
            }
        }
        false
    }
}

/// Largest smaller side handled by the exact assignment.
const EXACT_LIMIT: usize = 16;

/// One-to-one assignment of predicted to gold tuples maximizing total pair
/// F1, then total precision, then total recall. `assignment[i]` is the gold
/// index matched to predicted tuple `i`.
pub fn assign(scores: &[Vec<PairScore>], gold: usize) -> Vec<Option<usize>> {
    let pred = scores.len();
    if pred == 0 || gold == 0 {
        return vec![None; pred];
    }
    if pred.min(gold) > EXACT_LIMIT {
        return greedy_assign(scores, gold);
    }
    // Subset DP over the smaller side while walking the larger side.
    let transposed = gold < pred;
    let (outer, inner) = if transposed { (pred, gold) } else { (gold, pred) };
    let at = |o: usize, i: usize| if transposed { scores[o][i] } else { scores[i][o] };
    let full = 1usize << inner;
    let mut best = vec![None::<Objective>; full];
    best[0] = Some(Objective::default());
    let mut choice = vec![vec![None::<usize>; full]; outer];
    for (o, row) in choice.iter_mut().enumerate() {
        let mut next = best.clone();
        for mask in 0..full {
            let Some(cur) = best[mask] else { continue };
            for i in 0..inner {
                if mask & (1 << i) != 0 {
                    continue;
                }
                let cand = cur.plus(at(o, i));
                let m = mask | (1 << i);
                if next[m].is_none_or(|n| cand.beats(n)) {
                    next[m] = Some(cand);
                    row[m] = Some(i);
                }
            }
        }
        best = next;
    }
    let mut mask = (0..full)
        .filter(|&m| best[m].is_some())
        .fold(0, |acc, m| if best[m].unwrap().beats(best[acc].unwrap()) { m } else { acc });
    let mut out = vec![None; pred];
    for o in (0..outer).rev() {
        if let Some(i) = choice[o][mask] {
            if transposed {
                out[o] = Some(i);
            } else {
                out[i] = Some(o);
            }
            mask &= !(1 << i);
        }
    }
    out
}

/// Greedy matching by descending pair F1, ties to the lower indices.
pub fn greedy_assign(scores: &[Vec<PairScore>], gold: usize) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize)> = (0..scores.len()).flat_map(|p| (0..gold).map(move |g| (p, g))).collect();
    pairs.sort_by(|&(a, b), &(c, d)| scores[c][d].f1.total_cmp(&scores[a][b].f1).then((a, b).cmp(&(c, d))));
    let mut out = vec![None; scores.len()];
    let mut taken = vec![false; gold];
    for (p, g) in pairs {
        if out[p].is_none() && !taken[g] && scores[p][g].f1 > 0.0 {
            out[p] = Some(g);
            taken[g] = true;
        }
    }
    out
}

/// Precision, recall and F1 with the counts behind them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    /// Matched tuple pairs for tuple matching, correct extractions for
    /// fact-synset matching.
    pub matched: usize,
    /// Gold facts hit by at least one correct extraction (fact-synset only).
    pub facts_found: usize,
    pub sentences: Vec<SentenceScore>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub id: String,
    pub precision_sum: f64,
    pub recall_sum: f64,
    pub predicted: usize,
    pub gold: usize,
    pub matched: usize,
    pub facts_found: usize,
}

impl ScoreReport {
    /// Pools per-sentence sums into corpus-level scores.
    pub fn from_sentences(sentences: Vec<SentenceScore>, fact_level: bool) -> Self {
        let mut r = ScoreReport::default();
        let (mut ps, mut rs) = (0.0, 0.0);
        for s in &sentences {
            ps += s.precision_sum;
            rs += s.recall_sum;
            r.predicted += s.predicted;
            r.gold += s.gold;
            r.matched += s.matched;
            r.facts_found += s.facts_found;
        }
        if fact_level {
            r.precision = ratio0(r.matched as f64, r.predicted);
            r.recall = ratio0(r.facts_found as f64, r.gold);
        } else {
            r.precision = ratio0(ps, r.predicted);
            r.recall = ratio0(rs, r.gold);
        }
        r.f1 = f1(r.precision, r.recall);
        r.sentences = sentences;
        r
    }
}

fn ratio0(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.4} R={:.4} F1={:.4} predicted={} gold={} matched={}",
            self.precision, self.recall, self.f1, self.predicted, self.gold, self.matched
        )
    }
}

/// Token-level tuple matching for one sentence.
pub fn tuple_match_sentence(id: &str, predicted: &[SlotTuple], gold: &[SlotTuple]) -> SentenceScore {
    let scores: Vec<Vec<PairScore>> = predicted.iter().map(|p| gold.iter().map(|g| pair_score(p, g)).collect()).collect();
    let assignment = assign(&scores, gold.len());
    let mut s = SentenceScore {
        id: id.to_string(),
        predicted: predicted.len(),
        gold: gold.len(),
        ..SentenceScore::default()
    };
    for (p, g) in assignment.iter().enumerate() {
        if let Some(g) = *g {
            let ps = scores[p][g];
            s.precision_sum += ps.precision;
            s.recall_sum += ps.recall;
            if ps.f1 > 0.0 {
                s.matched += 1;
            }
        }
    }
    s
}

/// Token-level tuple matching: precision averages the matched pair
/// precision over predicted tuples, recall the matched pair recall over
/// gold tuples. Unmatched tuples score zero.
pub fn tuple_match(predicted: &[SlotTuple], gold: &[SlotTuple]) -> ScoreReport {
    ScoreReport::from_sentences(vec![tuple_match_sentence("", predicted, gold)], false)
}

/// Fact-synset matching for one sentence. Predictions are deduplicated by
/// normalized form; a prediction is correct when it is a member of some
/// synset's expansion.
pub fn fact_synset_sentence(id: &str, predicted: &[Triple], gold: &[BTreeSet<Triple>]) -> SentenceScore {
    let distinct: BTreeSet<Triple> = predicted.iter().map(normalize_triple).collect();
    let correct = distinct.iter().filter(|t| gold.iter().any(|g| g.contains(*t))).count();
    let found = gold.iter().filter(|g| distinct.iter().any(|t| g.contains(t))).count();
    SentenceScore {
        id: id.to_string(),
        precision_sum: correct as f64,
        recall_sum: found as f64,
        predicted: distinct.len(),
        gold: gold.len(),
        matched: correct,
        facts_found: found,
    }
}

pub fn fact_synset_match(predicted: &[Triple], gold: &[FactSynset]) -> Result<ScoreReport> {
    let expanded = gold.iter().map(FactSynset::expand).collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport::from_sentences(vec![fact_synset_sentence("", predicted, &expanded)], true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str, r: &str, o: &str) -> Triple {
        [s.to_string(), r.to_string(), o.to_string()]
    }

    #[test]
    fn expands_bracket_groups() {
        let forms = expand_optional(&t("[a] Royal Charter", "issued by", "[the] British King")).unwrap();
        assert_eq!(forms.len(), 4);
        assert!(forms.contains(&t("royal charter", "issued by", "british king")));
        assert!(forms.contains(&t("a royal charter", "issued by", "the british king")));
        assert_eq!(expand_text("plain  text").unwrap().len(), 1);
        assert_eq!(expand_text("[second largest] carnival").unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_brackets() {
        for bad in ["[a", "a]", "[a [b]]", "]["] {
            assert!(expand_text(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let g = vec![SlotTuple::new("issued", &["the king", "a charter"])];
        let r = tuple_match(&g, &g);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = tuple_match(&[], &g);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pair_score_by_slot() {
        let p = SlotTuple::new("issued", &["the king", "a charter"]);
        let g = SlotTuple::new("issued by", &["king", "a charter"]);
        let s = pair_score(&p, &g);
        assert!((s.precision - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
        assert!((s.recall - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!((s.f1 - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sentence_one_prediction_is_not_a_member() {
        let gold = FactSynset(vec![
            t("[a] Royal Charter", "issued by", "[the] British King"),
            t("[a] Royal Charter", "issued", "by [the] British King"),
            t("[a] Royal Charter", "issued by", "[the] [British] [King] James I"),
            t("[a] Royal Charter", "issued", "by [the] [British] [King] James I"),
        ]);
        let r = fact_synset_match(&[t("a Royal Charter", "issued", "by the British King James")], std::slice::from_ref(&gold)).unwrap();
        assert_eq!((r.matched, r.precision, r.recall), (0, 0.0, 0.0));
        let r = fact_synset_match(&[t("a Royal Charter", "issued", "by the British King James I")], &[gold]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn greedy_can_lose_to_the_exact_assignment() {
        let s = |f1| PairScore { precision: f1, recall: f1, f1 };
        let scores = vec![vec![s(0.9), s(0.8)], vec![s(0.7), s(0.0)]];
        assert_eq!(greedy_assign(&scores, 2), vec![Some(0), None]);
        assert_eq!(assign(&scores, 2), vec![Some(1), Some(0)]);
    }
}
