//! Offline annotator for two synthetic languages.
//!
//! `sa` shifts every ASCII letter one place forward; `sb` shifts by two and
//! reverses the token order. Extraction answers come from the gold tuples
//! of the source corpus: the first argument is the subject, the predicate
//! the relation and the remaining arguments, each rendered on its own and
//! joined in role order, the object. For `sb` a multi-argument object
//! therefore is not one continuous segment, which the pipeline rejects.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::bio::Span;
use crate::corpus::SentenceRecord;

use super::{AnnotatorClient, ClientError, Exemplar, Language};

pub const LANGUAGES: [&str; 2] = ["sa", "sb"];

const TRANSLATE_PREFIX: &str = "You are a translator. Please translate the following English text into the ";
const SENTENCE_MARK: &str = "from the translated sentence: ";
const SENTENCE_END: &str = ". Note that the subject,";

fn rule(lang: &str) -> Option<(u8, bool)> {
    match lang {
        "sa" => Some((1, false)),
        "sb" => Some((2, true)),
        _ => None,
    }
}

fn shift_token(token: &str, by: u8) -> String {
    token
        .chars()
        .map(|c| match c {
            'a'..='z' => (b'a' + (c as u8 - b'a' + by) % 26) as char,
            'A'..='Z' => (b'A' + (c as u8 - b'A' + by) % 26) as char,
            _ => c,
        })
        .collect()
}

/// Token-level translation into a synthetic language. `None` for other codes.
pub fn translate<S: AsRef<str>>(lang: &str, tokens: &[S]) -> Option<Vec<String>> {
    let (by, reverse) = rule(lang)?;
    let mut out: Vec<String> = tokens.iter().map(|t| shift_token(t.as_ref(), by)).collect();
    if reverse {
        out.reverse();
    }
    Some(out)
}

pub fn untranslate<S: AsRef<str>>(lang: &str, tokens: &[S]) -> Option<Vec<String>> {
    let (by, reverse) = rule(lang)?;
    let mut out: Vec<String> = tokens.iter().map(|t| shift_token(t.as_ref(), 26 - by)).collect();
    if reverse {
        out.reverse();
    }
    Some(out)
}

/// The fixed few-shot exemplar, translated into `lang`.
pub fn exemplar(lang: &str) -> Option<Exemplar> {
    let render = |s: &str| {
        let toks: Vec<&str> = s.split(' ').collect();
        translate(lang, &toks).map(|t| t.join(" "))
    };
    Some(Exemplar {
        sentence: render("the farmer sold the old house .")?,
        subject: render("the farmer")?,
        relation: render("sold")?,
        object: render("the old house")?,
    })
}

/// Pure mock client: the same prompt always gets the same answer.
pub struct MockAnnotator {
    gold: BTreeMap<String, (Vec<String>, Span, Vec<Span>)>,
    calls: AtomicUsize,
}

impl MockAnnotator {
    pub fn new(source: &[SentenceRecord]) -> Self {
        let gold = source
            .iter()
            .filter_map(|r| {
                let t = r.tuples.first()?;
                Some((r.tokens.join(" "), (r.tokens.clone(), t.predicate, t.arguments.clone())))
            })
            .collect();
        MockAnnotator {
            gold,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer_translate(&self, rest: &str) -> String {
        let Some((name, text)) = rest.split_once(": ") else {
            return String::new();
        };
        let Some(code) = Language::code_for(name) else {
            return String::new();
        };
        let tokens: Vec<&str> = text.split_whitespace().collect();
        translate(code, &tokens).map(|t| t.join(" ")).unwrap_or_default()
    }

    fn answer_extract(&self, prompt: &str) -> String {
        let Some(start) = prompt.rfind(SENTENCE_MARK) else {
            return String::new();
        };
        let rest = &prompt[start + SENTENCE_MARK.len()..];
        let sentence = rest.rfind(SENTENCE_END).map_or(rest, |end| &rest[..end]);
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        for lang in LANGUAGES {
            let source = untranslate(lang, &tokens).expect("known language").join(" ");
            if let Some((src, pred, args)) = self.gold.get(&source) {
                let render = |s: &Span| translate(lang, &src[s.start..s.end]).expect("known language").join(" ");
                let subject = render(&args[0]);
                let object = args[1..].iter().map(render).collect::<Vec<_>>().join(" ");
                return format!("{}, {}, {}", subject, render(pred), object);
            }
        }
        "I could not find a triple in this sentence.".to_string()
    }
}

impl AnnotatorClient for MockAnnotator {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match prompt.strip_prefix(TRANSLATE_PREFIX) {
            Some(rest) => self.answer_translate(rest),
            None => self.answer_extract(prompt),
        })
    }
}
