#![allow(dead_code)]

use polyoie::params::{ParamId, ParamStore};
use polyoie::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Central finite-difference gradient of `f` with respect to parameter `id`.
pub fn numeric_grad(
    store: &mut ParamStore,
    id: ParamId,
    h: f64,
    f: &dyn Fn(&ParamStore) -> f64,
) -> Tensor {
    let n = store.value(id).len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + h;
        let plus = f(store);
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let minus = f(store);
        store.get_mut(id).value.data_mut()[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(store.value(id).shape().to_vec(), out).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// are tiny.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

use std::path::PathBuf;

use polyoie::autodiff::{Tape, Var};
use polyoie::bio::Span;
use polyoie::corpus::{read_corpus, SentenceRecord};
use polyoie::encoder::Encoder;
use polyoie::evaluation::{pair_score, SlotTuple};
use polyoie::model::{Model, ModelConfig, TrainingExample};
use polyoie::autodiff::softmax;
use polyoie::molora::{PoolConfig, Site, SiteKind};
use polyoie::params::Group;
use polyoie::vocab::{Vocab, MARKER_ID};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

pub fn tiny_corpus() -> Vec<SentenceRecord> {
    read_corpus(&data("tiny_en.jsonl")).unwrap()
}

pub fn multi_corpus() -> Vec<SentenceRecord> {
    read_corpus(&data("tiny_multi.jsonl")).unwrap()
}

pub fn vocab_of(records: &[SentenceRecord]) -> Vocab {
    Vocab::build(records.iter().map(|r| r.tokens.as_slice()))
}

/// Width 8, two heads, one layer: fast enough for finite differences.
pub fn small_model(vocab: Vocab, seed: u64, pool: Option<PoolConfig>) -> Model {
    let mut cfg = ModelConfig::with_vocab(vocab.len());
    cfg.encoder.hidden_size = 8;
    cfg.encoder.num_heads = 2;
    cfg.encoder.num_layers = 1;
    cfg.encoder.ff_size = 12;
    cfg.encoder.max_len = 24;
    cfg.arg_blocks = 1;
    let mut model = Model::new(cfg, vocab, seed).unwrap();
    if let Some(p) = pool {
        model.attach(p).unwrap();
    }
    model
}

/// Replaces every parameter of `group` with fresh N(0, std) values.
pub fn randomize_group(model: &mut Model, group: Group, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| p.group == group)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = model.params.get_mut(id);
        for v in p.value.data_mut() {
            *v = r.gen_range(-std..std);
        }
    }
}

/// Largest finite-difference relative error of the full loss over every
/// parameter of a small model with a pool whose `B` matrices are non-zero.
pub fn model_loss_gradient_error(seed: u64) -> f64 {
    let tokens: Vec<String> = "the old king issued a royal charter in spring ."
        .split(' ')
        .map(String::from)
        .collect();
    let tuples = vec![polyoie::bio::ExtractionTuple {
        predicate: Span::new(3, 4),
        arguments: vec![Span::new(0, 3), Span::new(4, 7), Span::new(7, 9)],
    }];
    let vocab = Vocab::build([tokens.as_slice()]);
    let pool = PoolConfig {
        experts: 3,
        rank: 2,
        top_k: 2,
        embedding_site: true,
        ..PoolConfig::default()
    };
    let mut model = small_model(vocab.clone(), seed, Some(pool));
    randomize_group(&mut model, Group::Lora, seed + 1, 0.3);
    randomize_group(&mut model, Group::Gate, seed + 2, 0.5);
    model.params.set_trainable_groups(&Group::ALL);
    let example = TrainingExample::new(&vocab, &tokens, &tuples).unwrap();
    let grads = {
        let mut tape = Tape::new(&model.params);
        let loss = model.loss(&mut tape, &example, true).unwrap();
        tape.backward(loss).unwrap()
    };
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params.value(id).shape()));
        let m = model.clone();
        let mut store = model.params.clone();
        let f = |s: &ParamStore| {
            let mut probe = m.clone();
            probe.params = s.clone();
            probe.loss_value(&example, true).unwrap()
        };
        let numeric = numeric_grad(&mut store, id, 1e-5, &f);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Spans of a predicate tag sequence found by checking every `[i, j)`.
/// A span starts at B, or at an I that follows O or the sentence start,
/// and runs over the following I tags.
pub fn scan_predicate_spans(tags: &[usize]) -> Vec<Span> {
    let n = tags.len();
    let mut out = Vec::new();
    for i in 0..n {
        let starts = tags[i] == 1 || (tags[i] == 2 && (i == 0 || tags[i - 1] == 0));
        for j in i + 1..=n {
            let inside = tags[i + 1..j].iter().all(|&t| t == 2);
            let closed = j == n || tags[j] != 2;
            if starts && inside && closed {
                out.push(Span::new(i, j));
            }
        }
    }
    out
}

/// Best (precision sum, recall sum) over every one-to-one assignment,
/// ranked by total pair F1, then precision, then recall.
pub fn exhaustive_assignment(pred: &[SlotTuple], gold: &[SlotTuple]) -> (f64, f64) {
    fn go(
        i: usize,
        pred: &[SlotTuple],
        gold: &[SlotTuple],
        used: &mut Vec<bool>,
        acc: (f64, f64, f64),
        best: &mut (f64, f64, f64),
    ) {
        if i == pred.len() {
            let better = acc.0 > best.0 + 1e-12
                || ((acc.0 - best.0).abs() <= 1e-12
                    && (acc.1 > best.1 + 1e-12
                        || ((acc.1 - best.1).abs() <= 1e-12 && acc.2 > best.2 + 1e-12)));
            if better {
                *best = acc;
            }
            return;
        }
        go(i + 1, pred, gold, used, acc, best);
        for g in 0..gold.len() {
            if !used[g] {
                used[g] = true;
                let s = pair_score(&pred[i], &gold[g]);
                go(
                    i + 1,
                    pred,
                    gold,
                    used,
                    (acc.0 + s.f1, acc.1 + s.precision, acc.2 + s.recall),
                    best,
                );
                used[g] = false;
            }
        }
    }
    let mut best = (0.0, 0.0, 0.0);
    go(
        0,
        pred,
        gold,
        &mut vec![false; gold.len()],
        (0.0, 0.0, 0.0),
        &mut best,
    );
    (best.1, best.2)
}

/// A random span inside `[0, n)` avoiding every `taken` span, if one fits.
fn free_span(r: &mut ChaCha8Rng, n: usize, taken: &[Span]) -> Option<Span> {
    for _ in 0..20 {
        let start = r.gen_range(0..n);
        let end = r.gen_range(start + 1..=n.min(start + 3));
        let s = Span::new(start, end);
        if taken.iter().all(|t| s.end <= t.start || t.end <= s.start) {
            return Some(s);
        }
    }
    None
}

/// Sentence length and a valid tuple set: predicates never overlap each
/// other, arguments never overlap their own predicate or each other.
pub fn random_tuple_set(r: &mut ChaCha8Rng) -> (usize, Vec<polyoie::bio::ExtractionTuple>) {
    let n = r.gen_range(2..=14);
    let mut preds: Vec<Span> = Vec::new();
    for _ in 0..r.gen_range(0..=3) {
        if let Some(p) = free_span(r, n, &preds) {
            preds.push(p);
        }
    }
    let mut tuples = Vec::new();
    for &p in &preds {
        for _ in 0..r.gen_range(1..=2) {
            let mut taken = vec![p];
            let mut args = Vec::new();
            for _ in 0..r.gen_range(1..=4) {
                if let Some(a) = free_span(r, n, &taken) {
                    taken.push(a);
                    args.push(a);
                }
            }
            if !args.is_empty() {
                tuples.push(polyoie::bio::ExtractionTuple::new(p, args));
            }
        }
    }
    (n, tuples)
}

/// Decodes per-tuple tag sequences back into tuples.
pub fn decode_tuples(
    preds: &[Vec<usize>],
    args: &[Vec<usize>],
) -> Vec<polyoie::bio::ExtractionTuple> {
    use polyoie::bio::{assemble_tuple, decode_bio, TagSet};
    preds
        .iter()
        .zip(args)
        .filter_map(|(p, a)| {
            let spans = decode_bio(TagSet::Predicate, p).unwrap();
            assert_eq!(spans.len(), 1);
            assemble_tuple(spans[0].1, a).unwrap()
        })
        .collect()
}

const H: f64 = 1e-5;

/// Builds a store from `inputs`, runs `build` to a scalar, and returns the
/// worst relative error of any input's gradient against finite differences.
pub fn gradient_error(inputs: Vec<Tensor>, build: impl Fn(&mut Tape<'_>, &[Var]) -> Var) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), Group::Body, t).unwrap())
        .collect();
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new(s);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let grads = {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = build(&mut tape, &vars);
        tape.backward(out).unwrap()
    };
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let numeric = numeric_grad(&mut store, id, H, &eval);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum so that every output element gets a distinct upstream grad.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut r = rng(seed);
    let w = random_tensor(&mut r, shape[0], shape[1]);
    let w = tape.constant(w).unwrap();
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

pub fn shapes(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8))
}

/// Worst gradient error over every tape primitive on shapes drawn from `seed`.
pub fn primitive_gradient_error(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let (m, k, n) = shapes(100 + seed);
    let mut r = rng(seed);
    let a = random_tensor(&mut r, m, k);
    let b = random_tensor(&mut r, k, n);
    let bt = random_tensor(&mut r, n, k);
    let same = random_tensor(&mut r, m, k);
    let row = random_tensor(&mut r, 1, k);

    worst = worst.max(gradient_error(vec![a.clone(), b.clone()], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, c, seed)
    }));
    worst = worst.max(gradient_error(vec![a.clone(), bt.clone()], |t, v| {
        let c = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, c, seed)
    }));
    worst = worst.max(gradient_error(vec![a.clone(), same.clone()], |t, v| {
        let c = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, c, seed)
    }));
    worst = worst.max(gradient_error(vec![a.clone(), same.clone()], |t, v| {
        let c = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, c, seed)
    }));
    worst = worst.max(gradient_error(vec![a.clone(), row.clone()], |t, v| {
        let c = t.add_row(v[0], v[1]).unwrap();
        weighted_sum(t, c, seed)
    }));
    worst = worst.max(gradient_error(vec![a.clone()], |t, v| {
        let c = t.relu(v[0]).unwrap();
        weighted_sum(t, c, seed)
    }));
    for axis in 0..2 {
        worst = worst.max(gradient_error(vec![a.clone()], |t, v| {
            let c = t.softmax(v[0], axis).unwrap();
            weighted_sum(t, c, seed)
        }));
        worst = worst.max(gradient_error(vec![a.clone()], |t, v| {
            let c = t.mean(v[0], axis).unwrap();
            weighted_sum(t, c, seed)
        }));
    }
    if k >= 2 {
        let gamma = random_tensor(&mut r, 1, k);
        worst = worst.max(gradient_error(vec![a.clone(), gamma, row.clone()], |t, v| {
            let c = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, c, seed)
        }));
    }
    worst = worst.max(gradient_error(vec![a.clone(), same.clone()], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]).unwrap();
        weighted_sum(t, c, seed)
    }));
    let table = random_tensor(&mut r, 5, k);
    let ids: Vec<usize> = (0..m).map(|_| r.gen_range(0..5)).collect();
    worst = worst.max(gradient_error(vec![table], |t, v| {
        let c = t.embedding(v[0], &ids).unwrap();
        weighted_sum(t, c, seed)
    }));
    let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..k)).collect();
    let mut mask: Vec<bool> = (0..m).map(|_| r.gen_bool(0.7)).collect();
    mask[0] = true;
    worst = worst.max(gradient_error(vec![a.clone()], |t, v| t.cross_entropy(v[0], &targets, &mask).unwrap()));
    worst = worst.max(gradient_error(vec![a.clone()], |t, v| {
        let c = t.slice_rows(v[0], 0, m).unwrap();
        let d = t.slice_cols(c, k - 1, k).unwrap();
        weighted_sum(t, d, seed)
    }));
    let pos = random_tensor(&mut r, 1, k).map(|x| x.abs() + 0.1);
    worst = worst.max(gradient_error(vec![pos], |t, v| {
        let c = t.normalize(v[0]).unwrap();
        let idx: Vec<usize> = (0..k).rev().collect();
        let c = t.select_cols(c, &idx).unwrap();
        weighted_sum(t, c, seed)
    }));
    let s = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
    worst = worst.max(gradient_error(vec![a.clone(), s], |t, v| {
        let c = t.scale_by(v[0], v[1]).unwrap();
        let c = t.scale(c, -1.5).unwrap();
        weighted_sum(t, c, seed)
    }));
    worst
}

/// `(X Wq_h)(X Wk_h)ᵀ` with `X` = word + position rows, computed directly.
pub fn direct_scores(e: &Encoder, params: &ParamStore, layer: usize, head: usize, ids: &[usize]) -> Tensor {
    let full: Vec<usize> = std::iter::once(MARKER_ID).chain(ids.iter().copied()).collect();
    let d = e.config.hidden_size;
    let dk = e.config.head_dim();
    let mut x = vec![0.0; full.len() * d];
    for (i, &t) in full.iter().enumerate() {
        for c in 0..d {
            x[i * d + c] = params.value(e.word).get(t, c) + params.value(e.position).get(i, c);
        }
    }
    let block = &e.layers[layer];
    let project = |w: &Tensor| {
        let mut out = vec![0.0; full.len() * dk];
        for i in 0..full.len() {
            for j in 0..dk {
                out[i * dk + j] = (0..d).map(|c| x[i * d + c] * w.get(c, head * dk + j)).sum();
            }
        }
        out
    };
    let (q, k) = (project(params.value(block.wq)), project(params.value(block.wk)));
    let n = full.len();
    let s = (0..n * n)
        .map(|ij| (0..dk).map(|c| q[(ij / n) * dk + c] * k[(ij % n) * dk + c]).sum())
        .collect();
    Tensor::new(vec![n, n], s).unwrap()
}

/// Largest gap between a k = T pool delta and the softmax-weighted sum of
/// every expert's update computed by hand.
pub fn full_mixture_error(seed: u64) -> f64 {
    let vocab = vocab_of(&tiny_corpus());
    let pool = PoolConfig {
        experts: 6,
        rank: 3,
        top_k: 6,
        ..PoolConfig::default()
    };
    let mut model = small_model(vocab, seed, Some(pool));
    randomize_group(&mut model, Group::Lora, seed + 5, 0.5);
    randomize_group(&mut model, Group::Gate, seed + 6, 1.0);
    let pool = model.pool.clone().unwrap();
    let site = Site {
        layer: 0,
        kind: SiteKind::Value,
    };
    let mut r = rng(seed + 3);
    let h = random_tensor(&mut r, 5, 8);
    let e = random_tensor(&mut r, 1, 8);

    let mut tape = Tape::new(&model.params);
    let hv = tape.constant(h.clone()).unwrap();
    let ev = tape.constant(e.clone()).unwrap();
    let g = pool.gate_layer(&mut tape, 0, ev).unwrap();
    let delta = pool.delta(&mut tape, hv, site, &g).unwrap().unwrap();
    let got = tape.value(delta).clone();

    let probs = softmax(&e.matmul(model.params.value(pool.gates[0])).unwrap(), 1).unwrap();
    let scale = pool.config.scaling();
    let mut expected = Tensor::zeros(&[5, 8]);
    for (t, ex) in pool.site(site).unwrap().experts.iter().enumerate() {
        let a = model.params.value(ex.a);
        let b = model.params.value(ex.b);
        let up = h.matmul_nt(a).unwrap().matmul_nt(b).unwrap();
        expected.add_scaled_assign(&up, scale * probs.data()[t]);
    }
    got.data().iter().zip(expected.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
