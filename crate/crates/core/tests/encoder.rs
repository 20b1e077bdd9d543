mod common;

use polyoie::autodiff::softmax;
use polyoie::encoder::{Encoder, EncoderConfig};
use polyoie::params::ParamStore;
use polyoie::rng;
use polyoie::vocab::PAD_ID;
use rand::Rng;

fn encoder(seed: u64, vocab: usize) -> (Encoder, ParamStore) {
    let mut params = ParamStore::new();
    let mut r = rng::seeded(seed);
    let e = Encoder::create(EncoderConfig::with_vocab(vocab), &mut params, &mut r).unwrap();
    (e, params)
}

#[test]
fn score_terms_sum_to_direct_scores() {
    let (e, params) = encoder(5, 40);
    let mut r = common::rng(9);
    for _ in 0..25 {
        let n = r.gen_range(1..12);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(3..40)).collect();
        for layer in 0..e.config.num_layers {
            for head in 0..e.config.num_heads {
                let terms = e.score_terms(&params, layer, head, &ids).unwrap();
                let direct = common::direct_scores(&e, &params, layer, head, &ids);
                for (a, b) in terms.total().data().iter().zip(direct.data()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn first_layer_attention_uses_the_decomposed_scores() {
    let (e, params) = encoder(6, 30);
    let ids = [4, 9, 17, 3, 22];
    let weights = e.attention_weights(&params, &ids, 0).unwrap();
    let dk = e.config.head_dim() as f64;
    for (head, w) in weights.iter().enumerate() {
        let s = e.score_terms(&params, 0, head, &ids).unwrap().total().map(|v| v / dk.sqrt());
        let expected = softmax(&s, 1).unwrap();
        for (a, b) in w.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_is_never_attended() {
    let (e, params) = encoder(7, 30);
    let ids = [5, 6, PAD_ID, 8, PAD_ID];
    for layer in 0..e.config.num_layers {
        for w in e.attention_weights(&params, &ids, layer).unwrap() {
            for row in 0..w.rows() {
                assert_eq!(w.get(row, 3), 0.0);
                assert_eq!(w.get(row, 5), 0.0);
                let total: f64 = w.row(row).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn length_and_vocabulary_limits() {
    let (e, params) = encoder(8, 30);
    let max = e.config.max_len;
    assert!(e.encode(&params, &vec![5; max - 1], None).is_ok());
    assert!(e.encode(&params, &vec![5; max], None).is_err());
    assert!(e.encode(&params, &[5, 30], None).is_err());
    assert!(e.score_terms(&params, 4, 0, &[5]).is_err());
    assert!(e.score_terms(&params, 0, 4, &[5]).is_err());
}

#[test]
fn encoding_is_deterministic() {
    let (a, pa) = encoder(10, 25);
    let (b, pb) = encoder(10, 25);
    let ids = [3, 4, 5, 24];
    let ha = a.encode(&pa, &ids, None).unwrap();
    let hb = b.encode(&pb, &ids, None).unwrap();
    assert!(ha.last().bits_eq(hb.last()));
    assert_eq!(ha.layers.len(), a.config.num_layers + 1);
    assert_eq!(ha.last().shape(), &[ids.len() + 1, a.config.hidden_size]);
}
