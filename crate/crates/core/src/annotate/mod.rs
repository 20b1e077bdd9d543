//! Multilingual corpus construction: translate with one prompt, extract a
//! triple from the translation with a second, validate and align it.

pub mod mock;
pub mod prompt;
pub mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bio::{ExtractionTuple, Span};
use crate::corpus::{RejectedRecord, SentenceRecord};
use crate::error::{Error, Result};

pub use prompt::PromptTemplate;
pub use stats::{compute_stats, CorpusStats, LanguageStats};

#[derive(Debug, thiserror::Error)]
#[error("annotator request failed: {0}")]
pub struct ClientError(pub String);

/// Something that answers a rendered prompt.
pub trait AnnotatorClient: Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ClientError>;
}

/// Retries a failing client with exponential backoff.
pub struct RetryingClient<C> {
    pub inner: C,
    pub retries: usize,
    pub base_delay: Duration,
}

impl<C: AnnotatorClient> RetryingClient<C> {
    pub fn new(inner: C) -> Self {
        RetryingClient {
            inner,
            retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl<C: AnnotatorClient> AnnotatorClient for RetryingClient<C> {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ClientError> {
        let mut attempt = 0;
        loop {
            match self.inner.complete(prompt) {
                Ok(r) => return Ok(r),
                Err(e) if attempt >= self.retries => return Err(e),
                Err(_) => {
                    thread::sleep(self.base_delay * 2u32.pow(attempt as u32));
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Language {
    pub code: &'static str,
    pub name: &'static str,
}

const LANGUAGE_NAMES: [(&str, &str); 7] = [
    ("ar", "Arabic"),
    ("de", "German"),
    ("es", "Spanish"),
    ("pt", "Portuguese"),
    ("zh", "Chinese"),
    ("sa", "Synthetic-A"),
    ("sb", "Synthetic-B"),
];

impl Language {
    pub fn from_code(code: &str) -> Result<Language> {
        LANGUAGE_NAMES
            .iter()
            .find(|(c, _)| *c == code)
            .map(|&(code, name)| Language { code, name })
            .ok_or_else(|| Error::Config(format!("unknown language code {code:?}")))
    }

    pub fn code_for(name: &str) -> Option<&'static str> {
        LANGUAGE_NAMES.iter().find(|(_, n)| *n == name).map(|(c, _)| *c)
    }
}

/// The one worked example shown in the extraction prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exemplar {
    pub sentence: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rejection {
    /// The response is not a three-part triple.
    Parse,
    /// Some part is not a continuous token run of the translation.
    Segment,
    /// Every part occurs, but not without overlapping another.
    Alignment,
    /// The client kept failing.
    Transport,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::Parse => "parse",
            Rejection::Segment => "segment",
            Rejection::Alignment => "alignment",
            Rejection::Transport => "transport",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Valid,
    Rejected(Rejection),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub id: String,
    pub source: Vec<String>,
    pub lang: String,
    pub translation: String,
    pub triple: Option<[String; 3]>,
    pub tuple: Option<ExtractionTuple>,
    pub status: Status,
}

impl AnnotationRecord {
    pub fn tokens(&self) -> Vec<String> {
        self.translation.split_whitespace().map(str::to_string).collect()
    }

    pub fn to_sentence(&self) -> Option<SentenceRecord> {
        let tuple = self.tuple.clone()?;
        Some(SentenceRecord {
            id: self.id.clone(),
            lang: self.lang.clone(),
            tokens: self.tokens(),
            tuples: vec![tuple],
        })
    }

    pub fn to_rejected(&self) -> Option<RejectedRecord> {
        let Status::Rejected(reason) = self.status else {
            return None;
        };
        Some(RejectedRecord {
            id: self.id.clone(),
            lang: self.lang.clone(),
            tokens: self.tokens(),
            tuples: Vec::new(),
            reason: reason.as_str().to_string(),
        })
    }
}

/// Reads "Subject: s, Relation: r, Object: o" or the bare "s, r, o" form.
pub fn parse_triple(response: &str) -> Option<[String; 3]> {
    let line = response.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line.trim_start_matches(['(', '[']).trim_end_matches([')', ']']);
    let lower = line.to_lowercase();
    let parts: Vec<String> = if lower.contains("subject:") {
        let keys = ["subject:", "relation:", "object:"];
        let pos: Vec<usize> = keys.iter().map(|k| lower.find(k)).collect::<Option<_>>()?;
        if !(pos[0] < pos[1] && pos[1] < pos[2]) {
            return None;
        }
        (0..3)
            .map(|i| {
                let from = pos[i] + keys[i].len();
                let to = pos.get(i + 1).copied().unwrap_or(line.len());
                line[from..to].trim().trim_end_matches(',').trim().to_string()
            })
            .collect()
    } else {
        line.split(',').map(|p| p.trim().to_string()).collect()
    };
    if parts.len() != 3 || parts.iter().any(String::is_empty) {
        return None;
    }
    Some([parts[0].clone(), parts[1].clone(), parts[2].clone()])
}

/// Every start index where `part` occurs as a whole-token run of `tokens`.
pub fn occurrences(tokens: &[String], part: &[&str]) -> Vec<usize> {
    if part.is_empty() || part.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - part.len())
        .filter(|&i| tokens[i..i + part.len()].iter().zip(part).all(|(a, b)| a == b))
        .collect()
}

/// Leftmost non-overlapping alignment of subject, relation and object, in
/// that order.
pub fn align(tokens: &[String], triple: &[String; 3]) -> std::result::Result<[Span; 3], Rejection> {
    let parts: Vec<Vec<&str>> = triple.iter().map(|p| p.split_whitespace().collect()).collect();
    let found: Vec<Vec<usize>> = parts.iter().map(|p| occurrences(tokens, p)).collect();
    if found.iter().any(Vec::is_empty) {
        return Err(Rejection::Segment);
    }
    let mut spans: Vec<Span> = Vec::with_capacity(3);
    for (p, starts) in parts.iter().zip(&found) {
        let pick = starts
            .iter()
            .map(|&s| Span::new(s, s + p.len()))
            .find(|c| spans.iter().all(|t| c.end <= t.start || t.end <= c.start))
            .ok_or(Rejection::Alignment)?;
        spans.push(pick);
    }
    Ok([spans[0], spans[1], spans[2]])
}

/// Prompt-hash keyed response cache, one file per prompt.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    pub dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    pub fn key(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    fn path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", Self::key(prompt)))
    }

    pub fn get(&self, prompt: &str) -> Option<String> {
        fs::read_to_string(self.path(prompt)).ok()
    }

    /// Writes through a temporary file and renames it into place.
    pub fn put(&self, prompt: &str, response: &str) -> Result<()> {
        let path = self.path(prompt);
        let tmp = self.dir.join(format!(
            ".{}.{:?}.tmp",
            Self::key(prompt),
            thread::current().id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(response.as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| Error::io(&path, e))
    }
}

/// Client plus optional cache; counts requests that reached the client.
pub struct Annotator<'a> {
    pub client: &'a dyn AnnotatorClient,
    pub cache: Option<ResponseCache>,
    pub translate: PromptTemplate,
    pub extract: PromptTemplate,
    requests: AtomicUsize,
}

impl<'a> Annotator<'a> {
    pub fn new(client: &'a dyn AnnotatorClient, cache: Option<ResponseCache>) -> Self {
        Annotator {
            client,
            cache,
            translate: PromptTemplate::translate(),
            extract: PromptTemplate::extract(),
            requests: AtomicUsize::new(0),
        }
    }

    /// Client requests issued so far (cache hits excluded).
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn ask(&self, prompt: &str) -> Result<Option<String>> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(prompt)) {
            return Ok(Some(hit));
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let Ok(response) = self.client.complete(prompt) else {
            return Ok(None);
        };
        if let Some(c) = &self.cache {
            c.put(prompt, &response)?;
        }
        Ok(Some(response))
    }

    pub fn annotate_sentence(&self, src: &SentenceRecord, lang: Language, exemplar: &Exemplar) -> Result<AnnotationRecord> {
        let source = src.tokens.join(" ");
        let mut record = AnnotationRecord {
            id: src.id.clone(),
            source: src.tokens.clone(),
            lang: lang.code.to_string(),
            translation: String::new(),
            triple: None,
            tuple: None,
            status: Status::Rejected(Rejection::Transport),
        };
        let p1 = self.translate.render(&BTreeMap::from([("L", lang.name), ("X", source.as_str())]))?;
        let Some(translation) = self.ask(&p1)? else {
            return Ok(record);
        };
        record.translation = translation.split_whitespace().collect::<Vec<_>>().join(" ");
        let p2 = self.extract.render(&BTreeMap::from([
            ("Y1", exemplar.sentence.as_str()),
            ("S1", exemplar.subject.as_str()),
            ("R1", exemplar.relation.as_str()),
            ("O1", exemplar.object.as_str()),
            ("Y", record.translation.as_str()),
        ]))?;
        let Some(response) = self.ask(&p2)? else {
            return Ok(record);
        };
        let Some(triple) = parse_triple(&response) else {
            record.status = Status::Rejected(Rejection::Parse);
            return Ok(record);
        };
        record.status = match align(&record.tokens(), &triple) {
            Ok([s, r, o]) => {
                record.tuple = Some(ExtractionTuple {
                    predicate: r,
                    arguments: vec![s, o],
                });
                Status::Valid
            }
            Err(why) => Status::Rejected(why),
        };
        record.triple = Some(triple);
        Ok(record)
    }

    /// Annotates every (sentence, language) pair with at most `fan_out`
    /// requests in flight. Records come back ordered by (id, language).
    pub fn annotate_corpus(
        &self,
        corpus: &[SentenceRecord],
        languages: &[(Language, Exemplar)],
        fan_out: usize,
    ) -> Result<Vec<AnnotationRecord>> {
        let jobs: Vec<(&SentenceRecord, &(Language, Exemplar))> =
            corpus.iter().flat_map(|s| languages.iter().map(move |l| (s, l))).collect();
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Result<AnnotationRecord>>> = Mutex::new(Vec::with_capacity(jobs.len()));
        thread::scope(|scope| {
            for _ in 0..fan_out.clamp(1, jobs.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((src, (lang, ex))) = jobs.get(i) else { break };
                    let r = self.annotate_sentence(src, *lang, ex);
                    results.lock().expect("no worker panicked").push(r);
                });
            }
        });
        let mut records = results
            .into_inner()
            .expect("no worker panicked")
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        records.sort_by(|a, b| (&a.id, &a.lang).cmp(&(&b.id, &b.lang)));
        Ok(records)
    }
}

/// Valid records as corpus lines and rejected ones for the side file.
pub fn split_records(records: &[AnnotationRecord]) -> (Vec<SentenceRecord>, Vec<RejectedRecord>) {
    (
        records.iter().filter_map(AnnotationRecord::to_sentence).collect(),
        records.iter().filter_map(AnnotationRecord::to_rejected).collect(),
    )
}

/// Writes `<out>` with the valid records and `<out>.rejected` beside it.
pub fn write_outputs(out: &Path, records: &[AnnotationRecord]) -> Result<(usize, usize)> {
    let (valid, rejected) = split_records(records);
    crate::corpus::write_jsonl(out, &valid)?;
    let mut side = out.as_os_str().to_owned();
    side.push(".rejected");
    crate::corpus::write_jsonl(Path::new(&side), &rejected)?;
    Ok((valid.len(), rejected.len()))
}
