mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use polyoie::annotate::mock::{self, MockAnnotator};
use polyoie::annotate::{
    align, compute_stats, split_records, write_outputs, AnnotatorClient, Annotator, ClientError, Exemplar,
    Language, Rejection, ResponseCache, RetryingClient, Status,
};
use polyoie::bio::Span;
use polyoie::corpus::{read_jsonl, RejectedRecord, SentenceRecord};
use rand::Rng;

fn synthetic() -> Vec<(Language, Exemplar)> {
    mock::LANGUAGES
        .iter()
        .map(|c| (Language::from_code(c).unwrap(), mock::exemplar(c).unwrap()))
        .collect()
}

#[test]
fn mock_translation_round_trips() {
    for r in common::tiny_corpus() {
        for lang in mock::LANGUAGES {
            let t = mock::translate(lang, &r.tokens).unwrap();
            assert_eq!(t.len(), r.tokens.len());
            assert_eq!(mock::untranslate(lang, &t).unwrap(), r.tokens);
        }
    }
    assert_eq!(mock::translate("sa", &["Zebra", "."]).unwrap(), ["Afcsb", "."]);
    assert_eq!(mock::translate("sb", &["ab", "yz"]).unwrap(), ["ab", "cd"]);
    assert!(mock::translate("de", &["x"]).is_none());
}

#[test]
fn annotated_tuples_point_at_translated_gold() {
    let corpus = common::tiny_corpus();
    let client = MockAnnotator::new(&corpus);
    let annotator = Annotator::new(&client, None);
    let records = annotator.annotate_corpus(&corpus, &synthetic(), 4).unwrap();
    assert_eq!(records.len(), 2 * corpus.len());
    for rec in &records {
        let src = corpus.iter().find(|s| s.id == rec.id).unwrap();
        let gold = &src.tuples[0];
        match rec.status {
            Status::Valid => {
                let t = rec.tuple.as_ref().unwrap();
                let toks = rec.tokens();
                let back = |s: Span| mock::untranslate(&rec.lang, &toks[s.start..s.end]).unwrap();
                let src_words = |s: Span| src.tokens[s.start..s.end].to_vec();
                assert_eq!(back(t.predicate), src_words(gold.predicate));
                assert_eq!(back(t.arguments[0]), src_words(gold.arguments[0]));
                assert_eq!(t.arguments.len(), 2);
            }
            Status::Rejected(why) => {
                // Only the reversing language splits a multi-argument object.
                assert_eq!((rec.lang.as_str(), why), ("sb", Rejection::Segment), "{}", rec.id);
                assert!(gold.arguments.len() > 2);
            }
        }
    }
    let rejected = records.iter().filter(|r| r.status != Status::Valid).count();
    let three_args = corpus.iter().filter(|s| s.tuples[0].arguments.len() > 2).count();
    assert_eq!(rejected, three_args);
    assert_eq!(annotator.requests(), client.calls());
    assert_eq!(client.calls(), 4 * corpus.len());
}

#[test]
fn bundled_multilingual_corpus_is_reproduced() {
    let corpus = common::tiny_corpus();
    let client = MockAnnotator::new(&corpus);
    let records = Annotator::new(&client, None).annotate_corpus(&corpus, &synthetic(), 3).unwrap();
    let (valid, _) = split_records(&records);
    assert_eq!(valid, common::multi_corpus());
}

#[test]
fn outputs_go_to_two_files() {
    let corpus = common::tiny_corpus();
    let client = MockAnnotator::new(&corpus);
    let records = Annotator::new(&client, None).annotate_corpus(&corpus, &synthetic(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("multi.jsonl");
    let (v, r) = write_outputs(&out, &records).unwrap();
    assert_eq!(v + r, records.len());
    let valid: Vec<SentenceRecord> = read_jsonl(&out).unwrap();
    let rejected: Vec<RejectedRecord> = read_jsonl(&dir.path().join("multi.jsonl.rejected")).unwrap();
    assert_eq!((valid.len(), rejected.len()), (v, r));
    assert!(rejected.iter().all(|x| x.reason == "segment" && x.tuples.is_empty()));
    for s in &valid {
        s.validate().unwrap();
    }
    // Every sentence lands in exactly one language column.
    let stats = compute_stats(&valid);
    assert_eq!(stats.total_sentences(), v);
    assert_eq!(stats.languages.values().map(|s| s.tuples).sum::<usize>(), v);
}

#[test]
fn warm_cache_issues_no_requests() {
    let corpus: Vec<SentenceRecord> = common::tiny_corpus().into_iter().take(2).collect();
    let dir = tempfile::tempdir().unwrap();
    let langs: Vec<(Language, Exemplar)> = ["sa", "sb", "sa"]
        .iter()
        .map(|c| (Language::from_code(c).unwrap(), mock::exemplar(c).unwrap()))
        .collect();
    let cold_client = MockAnnotator::new(&corpus);
    let cold = Annotator::new(&cold_client, Some(ResponseCache::new(dir.path()).unwrap()));
    let first = cold.annotate_corpus(&corpus, &langs, 1).unwrap();
    assert_eq!(first.len(), 6);
    // The repeated language hits the cache written by its first pass.
    assert_eq!(cold.requests(), 8);

    let warm_client = MockAnnotator::new(&corpus);
    let warm = Annotator::new(&warm_client, Some(ResponseCache::new(dir.path()).unwrap()));
    let second = warm.annotate_corpus(&corpus, &langs, 3).unwrap();
    assert_eq!(warm.requests(), 0);
    assert_eq!(warm_client.calls(), 0);
    assert_eq!(first, second);
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 8);
}

#[test]
fn cache_keys_are_prompt_digests() {
    assert_eq!(
        ResponseCache::key("abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn unwritable_cache_is_an_error() {
    let corpus: Vec<SentenceRecord> = common::tiny_corpus().into_iter().take(1).collect();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    assert!(ResponseCache::new(file.join("sub")).is_err());
    let client = MockAnnotator::new(&corpus);
    let cache = ResponseCache { dir: file.join("sub") };
    let annotator = Annotator::new(&client, Some(cache));
    assert!(annotator.annotate_corpus(&corpus, &synthetic(), 1).is_err());
}

#[test]
fn fan_out_does_not_change_results() {
    let corpus = common::tiny_corpus();
    let client = MockAnnotator::new(&corpus);
    let one = Annotator::new(&client, None).annotate_corpus(&corpus, &synthetic(), 1).unwrap();
    for fan in [2, 7, 64] {
        let many = Annotator::new(&client, None).annotate_corpus(&corpus, &synthetic(), fan).unwrap();
        assert_eq!(one, many);
    }
}

/// Fails the first `failures` calls, then delegates.
struct Flaky<'a> {
    inner: &'a MockAnnotator,
    failures: usize,
    seen: AtomicUsize,
}

impl AnnotatorClient for Flaky<'_> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        if self.seen.fetch_add(1, Ordering::SeqCst) < self.failures {
            return Err(ClientError("503".into()));
        }
        self.inner.complete(prompt)
    }
}

#[test]
fn retries_recover_and_exhaustion_rejects() {
    let corpus: Vec<SentenceRecord> = common::tiny_corpus().into_iter().take(1).collect();
    let mockc = MockAnnotator::new(&corpus);
    let lang = [(Language::from_code("sa").unwrap(), mock::exemplar("sa").unwrap())];
    let retrying = |failures| RetryingClient {
        inner: Flaky { inner: &mockc, failures, seen: AtomicUsize::new(0) },
        retries: 3,
        base_delay: Duration::from_millis(1),
    };
    let ok = retrying(3);
    let recs = Annotator::new(&ok, None).annotate_corpus(&corpus, &lang, 1).unwrap();
    assert_eq!(recs[0].status, Status::Valid);
    assert_eq!(ok.inner.seen.load(Ordering::SeqCst), 5);

    let dead = retrying(usize::MAX);
    let recs = Annotator::new(&dead, None).annotate_corpus(&corpus, &lang, 1).unwrap();
    assert_eq!(recs[0].status, Status::Rejected(Rejection::Transport));
    assert_eq!(dead.inner.seen.load(Ordering::SeqCst), 4);
    assert!(split_records(&recs).0.is_empty());
}

/// Leftmost placement by plain string search over space-padded text.
fn align_oracle(tokens: &[String], triple: &[String; 3]) -> Option<[Span; 3]> {
    let text = format!(" {} ", tokens.join(" "));
    let token_at = |byte: usize| text[..byte].matches(' ').count() - 1;
    let mut spans: Vec<Span> = Vec::new();
    for part in triple {
        let needle = format!(" {part} ");
        let n = part.split(' ').count();
        let mut from = 0;
        let mut pick = None;
        while let Some(i) = text[from..].find(&needle) {
            let start = token_at(from + i + 1);
            let s = Span::new(start, start + n);
            if spans.iter().all(|t| s.end <= t.start || t.end <= s.start) {
                pick = Some(s);
                break;
            }
            from += i + 1;
        }
        spans.push(pick?);
    }
    Some([spans[0], spans[1], spans[2]])
}

#[test]
fn alignment_matches_string_search() {
    let mut rng = common::rng(50);
    let words = ["a", "b", "c", "d", "e", "f"];
    let mut valid = 0;
    for _ in 0..50 {
        let n = rng.gen_range(6..=14);
        let tokens: Vec<String> = (0..n).map(|_| words[rng.gen_range(0..6)].to_string()).collect();
        let part = |rng: &mut rand_chacha::ChaCha8Rng| {
            let len = rng.gen_range(1..=2);
            let s = rng.gen_range(0..=n - len);
            if rng.gen_bool(0.1) {
                "zz".to_string()
            } else {
                tokens[s..s + len].join(" ")
            }
        };
        let triple = [part(&mut rng), part(&mut rng), part(&mut rng)];
        let got = align(&tokens, &triple);
        match align_oracle(&tokens, &triple) {
            Some(spans) => {
                valid += 1;
                assert_eq!(got, Ok(spans), "{tokens:?} {triple:?}");
            }
            None if triple.iter().any(|p| p == "zz") => assert_eq!(got, Err(Rejection::Segment)),
            None => assert_eq!(got, Err(Rejection::Alignment), "{tokens:?} {triple:?}"),
        }
    }
    assert!(valid > 20, "{valid}");
}
