//! Per-language corpus statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::corpus::SentenceRecord;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LanguageStats {
    pub sentences: usize,
    pub tuples: usize,
    /// Token lengths; absent when there are no sentences.
    pub max_len: Option<usize>,
    pub min_len: Option<usize>,
    pub avg_len: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub languages: BTreeMap<String, LanguageStats>,
}

pub fn compute_stats(corpus: &[SentenceRecord]) -> CorpusStats {
    let mut totals: BTreeMap<String, (LanguageStats, usize)> = BTreeMap::new();
    for r in corpus {
        let (s, len_sum) = totals.entry(r.lang.clone()).or_default();
        let n = r.tokens.len();
        s.sentences += 1;
        s.tuples += r.tuples.len();
        s.max_len = Some(s.max_len.map_or(n, |m| m.max(n)));
        s.min_len = Some(s.min_len.map_or(n, |m| m.min(n)));
        *len_sum += n;
    }
    let languages = totals
        .into_iter()
        .map(|(lang, (mut s, len_sum))| {
            s.avg_len = Some(len_sum as f64 / s.sentences as f64);
            (lang, s)
        })
        .collect();
    CorpusStats { languages }
}

impl CorpusStats {
    pub fn total_sentences(&self) -> usize {
        self.languages.values().map(|s| s.sentences).sum()
    }
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// A table with one column per language and the rows
/// `#Sent.`, `#Tuples`, `Max_len`, `Min_len`, `Avg_len`.
impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let langs: Vec<&String> = self.languages.keys().collect();
        let rows: [(&str, Box<dyn Fn(&LanguageStats) -> String>); 5] = [
            ("#Sent.", Box::new(|s| s.sentences.to_string())),
            ("#Tuples", Box::new(|s| s.tuples.to_string())),
            ("Max_len", Box::new(|s| cell(s.max_len))),
            ("Min_len", Box::new(|s| cell(s.min_len))),
            ("Avg_len", Box::new(|s| cell(s.avg_len.map(|a| format!("{a:.1}"))))),
        ];
        write!(f, "{:<10}", "Statistics")?;
        for l in &langs {
            write!(f, " {:>8}", l)?;
        }
        writeln!(f)?;
        for (name, get) in rows {
            write!(f, "{name:<10}")?;
            for l in &langs {
                write!(f, " {:>8}", get(&self.languages[*l]))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
