//! Line-delimited JSON corpus files.
//!
//! One sentence per line:
//! `{"id": .., "lang": .., "tokens": [..], "tuples": [{"pred": [s, e], "args": [[s, e], ..]}]}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bio::ExtractionTuple;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub lang: String,
    pub tokens: Vec<String>,
    pub tuples: Vec<ExtractionTuple>,
}

impl SentenceRecord {
    pub fn validate(&self) -> Result<()> {
        for t in &self.tuples {
            t.validate(self.tokens.len())?;
        }
        Ok(())
    }
}

/// A record that failed annotation, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub id: String,
    pub lang: String,
    pub tokens: Vec<String>,
    pub tuples: Vec<ExtractionTuple>,
    pub reason: String,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads and validates a corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<SentenceRecord>> {
    let records: Vec<SentenceRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()
            .map_err(|e| Error::data(format!("{} record {}", path.display(), r.id), e.to_string()))?;
    }
    Ok(records)
}

/// Records grouped by language, in language-code order.
pub fn by_language(records: &[SentenceRecord]) -> BTreeMap<&str, Vec<&SentenceRecord>> {
    let mut map: BTreeMap<&str, Vec<&SentenceRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.lang.as_str()).or_default().push(r);
    }
    map
}
