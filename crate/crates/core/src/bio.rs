//! BIO tag scheme, span decoding and training-target encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of argument roles (A0..A3).
pub const ARG_ROLES: usize = 4;
pub const NUM_PREDICATE_TAGS: usize = 3;
pub const NUM_ARGUMENT_TAGS: usize = 1 + 2 * ARG_ROLES;

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn check(&self, sentence_len: usize) -> Result<()> {
        if self.start < self.end && self.end <= sentence_len {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "span [{}, {}) invalid for sentence of length {sentence_len}",
                self.start, self.end
            )))
        }
    }
}

/// One predicate and its ordered arguments; `arguments[0]` is the subject.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractionTuple {
    #[serde(rename = "pred")]
    pub predicate: Span,
    #[serde(rename = "args")]
    pub arguments: Vec<Span>,
}

impl ExtractionTuple {
    pub fn new(predicate: Span, arguments: Vec<Span>) -> Self {
        ExtractionTuple {
            predicate,
            arguments,
        }
    }

    pub fn validate(&self, sentence_len: usize) -> Result<()> {
        self.predicate.check(sentence_len)?;
        if self.arguments.is_empty() {
            return Err(Error::Invalid("tuple without arguments".into()));
        }
        if self.arguments.len() > ARG_ROLES {
            return Err(Error::Invalid(format!(
                "tuple has {} arguments, at most {ARG_ROLES} roles are supported",
                self.arguments.len()
            )));
        }
        for a in &self.arguments {
            a.check(sentence_len)?;
        }
        for (i, a) in self.arguments.iter().enumerate() {
            if self.arguments[i + 1..].iter().any(|b| a.overlaps(b)) {
                return Err(Error::Invalid("overlapping argument spans within a tuple".into()));
            }
        }
        Ok(())
    }

    /// Renders `arg1 --> pred --> arg2 [--> arg3 ...]`.
    pub fn render<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        let text = |s: &Span| join(&tokens[s.start..s.end]);
        let mut parts = Vec::with_capacity(self.arguments.len() + 1);
        let mut args = self.arguments.iter();
        if let Some(subj) = args.next() {
            parts.push(text(subj));
        }
        parts.push(text(&self.predicate));
        parts.extend(args.map(text));
        parts.join(" --> ")
    }
}

pub(crate) fn join<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Which half of the tag inventory a sequence is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagSet {
    Predicate,
    Argument,
}

impl TagSet {
    pub fn size(self) -> usize {
        match self {
            TagSet::Predicate => NUM_PREDICATE_TAGS,
            TagSet::Argument => NUM_ARGUMENT_TAGS,
        }
    }
}

/// Label of a decoded span: the predicate, or argument role `n` (A0..A3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Predicate,
    Argument(usize),
}

pub const OUTSIDE: usize = 0;

pub fn begin_tag(role_index: usize) -> usize {
    1 + 2 * role_index
}

pub fn inside_tag(role_index: usize) -> usize {
    2 + 2 * role_index
}

/// Fixed tag inventory; the id of a tag is its position in these lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagScheme {
    pub predicate: Vec<String>,
    pub argument: Vec<String>,
}

impl Default for TagScheme {
    fn default() -> Self {
        let mut argument = vec!["O".to_string()];
        for r in 0..ARG_ROLES {
            argument.push(format!("B-A{r}"));
            argument.push(format!("I-A{r}"));
        }
        TagScheme {
            predicate: vec!["O".into(), "B-P".into(), "I-P".into()],
            argument,
        }
    }
}

impl TagScheme {
    pub fn label(&self, set: TagSet, id: usize) -> Option<&str> {
        match set {
            TagSet::Predicate => self.predicate.get(id),
            TagSet::Argument => self.argument.get(id),
        }
        .map(String::as_str)
    }
}

fn role_for(set: TagSet, role_index: usize) -> Role {
    match set {
        TagSet::Predicate => Role::Predicate,
        TagSet::Argument => Role::Argument(role_index),
    }
}

/// Turns a tag-id sequence into labeled spans.
///
/// Maximal `B-X (I-X)*` runs become spans. An `I-X` that does not continue a
/// run of the same role opens a new span, exactly as if it were `B-X`.
pub fn decode_bio(set: TagSet, tags: &[usize]) -> Result<Vec<(Role, Span)>> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        if t >= set.size() {
            return Err(Error::Invalid(format!("unknown tag id {t} for {set:?} tags")));
        }
        if t == OUTSIDE {
            if let Some((role, start)) = open.take() {
                out.push((role_for(set, role), Span::new(start, i)));
            }
            continue;
        }
        let role = (t - 1) / 2;
        let begins = (t - 1) % 2 == 0;
        match open {
            Some((r, _)) if r == role && !begins => {}
            _ => {
                if let Some((r, start)) = open.take() {
                    out.push((role_for(set, r), Span::new(start, i)));
                }
                open = Some((role, i));
            }
        }
    }
    if let Some((role, start)) = open {
        out.push((role_for(set, role), Span::new(start, tags.len())));
    }
    Ok(out)
}

/// Tag sequences for one tuple: predicate tags and argument tags.
pub fn encode_tuple(sentence_len: usize, tuple: &ExtractionTuple) -> Result<(Vec<usize>, Vec<usize>)> {
    tuple.validate(sentence_len)?;
    let mut pred = vec![OUTSIDE; sentence_len];
    mark(&mut pred, &tuple.predicate, 0);
    let mut args = vec![OUTSIDE; sentence_len];
    for (role, span) in tuple.arguments.iter().enumerate() {
        mark(&mut args, span, role);
    }
    Ok((pred, args))
}

fn mark(tags: &mut [usize], span: &Span, role: usize) {
    tags[span.start] = begin_tag(role);
    for t in &mut tags[span.start + 1..span.end] {
        *t = inside_tag(role);
    }
}

/// Per-tuple predicate and argument tag sequences.
pub fn encode_tags(
    sentence_len: usize,
    tuples: &[ExtractionTuple],
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let mut preds = Vec::with_capacity(tuples.len());
    let mut args = Vec::with_capacity(tuples.len());
    for t in tuples {
        let (p, a) = encode_tuple(sentence_len, t)?;
        preds.push(p);
        args.push(a);
    }
    Ok((preds, args))
}

/// Single predicate-tag target marking every distinct predicate span.
/// Distinct predicates that overlap cannot share one BIO sequence.
pub fn predicate_target(sentence_len: usize, tuples: &[ExtractionTuple]) -> Result<Vec<usize>> {
    let mut spans: Vec<Span> = tuples.iter().map(|t| t.predicate).collect();
    spans.sort();
    spans.dedup();
    let mut tags = vec![OUTSIDE; sentence_len];
    for (i, s) in spans.iter().enumerate() {
        s.check(sentence_len)?;
        if spans[i + 1..].iter().any(|o| o.overlaps(s)) {
            return Err(Error::Invalid("distinct predicate spans overlap".into()));
        }
        mark(&mut tags, s, 0);
    }
    Ok(tags)
}

/// Builds the tuple for one predicate from decoded argument tags. The first
/// span of each role is kept; roles are ordered A0..A3 with gaps closed.
pub fn assemble_tuple(predicate: Span, arg_tags: &[usize]) -> Result<Option<ExtractionTuple>> {
    let mut by_role: [Option<Span>; ARG_ROLES] = [None; ARG_ROLES];
    for (role, span) in decode_bio(TagSet::Argument, arg_tags)? {
        if let Role::Argument(r) = role {
            by_role[r].get_or_insert(span);
        }
    }
    let arguments: Vec<Span> = by_role.into_iter().flatten().collect();
    Ok((!arguments.is_empty()).then(|| ExtractionTuple::new(predicate, arguments)))
}
