//! Analytic gradients against central finite differences.

mod common;

use common::{gradient_error, random_tensor, rng, weighted_sum};
use polyoie::autodiff::{Tape, Var};
use polyoie::params::{Group, ParamStore};
use polyoie::tensor::Tensor;

fn check(inputs: Vec<Tensor>, tol: f64, build: impl Fn(&mut Tape<'_>, &[Var]) -> Var) {
    let err = gradient_error(inputs, build);
    assert!(err < tol, "worst relative error {err:e}");
}

#[test]
fn matmul_sum_gradient_3x4_by_4x2() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, 3, 4);
    let b = random_tensor(&mut r, 4, 2);
    check(vec![a, b], 1e-6, |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c).unwrap()
    });
}

#[test]
fn primitive_gradients_on_random_shapes() {
    for seed in 0..6u64 {
        let err = common::primitive_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: worst relative error {err:e}");
    }
}

#[test]
fn masked_softmax_gradient() {
    let mut r = rng(9);
    let a = random_tensor(&mut r, 4, 5);
    let keep = [true, false, true, true, false];
    check(vec![a], 1e-4, |t, v| {
        let c = t.masked_softmax_rows(v[0], &keep).unwrap();
        weighted_sum(t, c, 3)
    });
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut store = ParamStore::new();
    let p = store.insert("p", Group::Word, Tensor::full(&[2, 3], 0.5)).unwrap();
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(p).unwrap(), &Tensor::full(&[2, 3], 1.0));
}

#[test]
fn frozen_parameter_gets_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Group::Word, Tensor::full(&[2, 2], 1.0)).unwrap();
    let b = store.insert("b", Group::Position, Tensor::full(&[2, 2], 2.0)).unwrap();
    store.set_trainable_groups(&[Group::Word]);
    let grads = {
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.param(a), tape.param(b));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap()
    };
    assert!(grads.get(b).is_none());
    store.accumulate(&grads, 1.0);
    assert!(store.get(b).grad.data().iter().all(|&g| g == 0.0));
    assert!(store.get(a).grad.data().iter().any(|&g| g != 0.0));
}

#[test]
fn backward_requires_scalar() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Group::Word, Tensor::full(&[2, 2], 1.0)).unwrap();
    let mut tape = Tape::new(&store);
    let v = tape.param(a);
    assert!(tape.backward(v).is_err());
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let a = store.insert("a", Group::Body, random_tensor(&mut r, 3, 4)).unwrap();
    let b = store.insert("b", Group::Body, random_tensor(&mut r, 4, 3)).unwrap();
    let mut tape = Tape::new(&store);
    let (va, vb) = (tape.param(a), tape.param(b));
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.softmax(c, 1).unwrap();
    let l = tape.cross_entropy(s, &[0, 1, 2], &[true, true, true]).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    assert!(g1.bits_eq(&g2));
}

#[test]
fn non_finite_output_names_the_op() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::full(&[1, 2], 1e300)).unwrap();
    let err = tape.mul(x, x).unwrap_err();
    assert!(err.to_string().contains("mul"), "{err}");
}

#[test]
fn dimension_mismatch_is_reported() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(polyoie::Error::Shape { .. })));
}

#[test]
fn full_model_loss_matches_finite_differences() {
    for seed in [11, 12] {
        let err = common::model_loss_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: worst relative error {err:e}");
    }
}
