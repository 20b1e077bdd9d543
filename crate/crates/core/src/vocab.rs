//! Whitespace tokenization and a corpus-built vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Sentence-start marker prepended to every encoded sentence.
pub const MARKER: &str = "<s>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MARKER_ID: usize = 2;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("empty vocabulary is valid")
    }
}

impl Vocab {
    /// Builds a vocabulary in first-seen order after the reserved entries.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut v = Vocab::default();
        for sent in sentences {
            for tok in sent {
                if !v.index.contains_key(tok) {
                    v.index.insert(tok.clone(), v.tokens.len());
                    v.tokens.push(tok.clone());
                }
            }
        }
        v
    }

    /// Rebuilds from a full token list whose first three entries are the
    /// reserved tokens, or from a list without them.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD, UNK, MARKER];
        let mut all: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        let rest = if tokens.len() >= 3 && tokens[..3] == all[..] {
            &tokens[3..]
        } else {
            &tokens[..]
        };
        all.extend(rest.iter().cloned());
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("vocabulary token {t:?} is empty or has whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 3
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
