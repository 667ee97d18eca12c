use std::collections::BTreeMap;

use camnet_autodiff::probe::{probe, PRIMITIVES};
use camnet_autodiff::{grad_check, AutodiffError, NanPolicy, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn elu_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0, -1.0]));
    let y = t.elu(x).unwrap();
    let v = t.value(y).data();
    assert_eq!(v[0], 1.0);
    assert!(close(v[1], (-1.0f64).exp() - 1.0, 1e-15));
    assert!(close(v[1], -0.63212, 1e-5));
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[2, 5], 3.7));
    let y = t.layer_norm(x, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn single_edge_softmax_is_one() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-3.2, 7.0]));
    let y = t.segment_softmax(x, &[0, 1]).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 1.0]);
}

#[test]
fn segment_softmax_sums_to_one_per_segment() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(4, 2, vec![0.1, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, -2.0]).unwrap());
    let y = t.segment_softmax(x, &[1, 0, 1, 1]).unwrap();
    let v = t.value(y).data();
    for c in 0..2 {
        assert!(v[c] > 0.0 && v[c] < 1.0);
        assert!(close(v[2 + c], 1.0, 1e-15));
        assert!(close(v[c] + v[4 + c] + v[6 + c], 1.0, 1e-15));
    }
}

#[test]
fn quadratic_gradient() {
    let mut t = Tape::new();
    let w = t.param("w", Tensor::vector(vec![1.0, 2.0]));
    let sq = t.mul(w, w).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.named()["w"].data(), &[2.0, 4.0]);
    assert_eq!(g.wrt(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut t = Tape::new();
    let w = t.param("w", Tensor::vector(vec![1.0, 2.0]));
    let p = t.param("p", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
    let loss = t.sum(w).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.named()["p"], Tensor::zeros(&[2, 2]));
    assert_eq!(g.wrt(p).unwrap(), Tensor::zeros(&[2, 2]));
}

#[test]
fn chained_matmul_matches_finite_differences() {
    let mut params = ParamStore::new();
    params.insert("a", Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.0]).unwrap());
    params.insert("b", Tensor::matrix(2, 2, vec![1.1, 0.4, -0.5, 0.9]).unwrap());
    params.insert("c", Tensor::matrix(2, 2, vec![-0.2, 0.8, 1.5, -0.6]).unwrap());
    let f = |t: &mut Tape, v: &BTreeMap<String, Var>| {
        let ab = t.matmul(v["a"], v["b"])?;
        let abc = t.matmul(ab, v["c"])?;
        let th = t.tanh(abc)?;
        t.sum(th)
    };
    let r = grad_check(f, &params, 1e-5).unwrap();
    assert!(r.deterministic);
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    assert_eq!(r.coordinates, 12);
}

#[test]
fn diamond_accumulates() {
    // y = x²·exp(x) built as u = x², v = exp(x), y = u·v; dy/dx = (2x + x²)·eˣ.
    let x0 = 0.7f64;
    let mut t = Tape::new();
    let x = t.param("x", Tensor::scalar(x0));
    let u = t.mul(x, x).unwrap();
    let v = t.exp(x).unwrap();
    let y = t.mul(u, v).unwrap();
    let g = t.backward(y).unwrap();
    let want = (2.0 * x0 + x0 * x0) * x0.exp();
    assert!(close(g.named()["x"].data()[0], want, 1e-14));
}

#[test]
fn shared_name_sums_gradients() {
    let mut t = Tape::new();
    let a = t.param("w", Tensor::scalar(3.0));
    let b = t.param("w", Tensor::scalar(3.0));
    let y = t.mul(a, b).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.named()["w"].data(), &[6.0]);
}

#[test]
fn errors_surface() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    let c = t.constant(Tensor::zeros(&[4]));
    assert!(matches!(t.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
    let z = t.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(t.log(z), Err(AutodiffError::NonFiniteValue { op: "log" })));

    let mut other = Tape::new();
    let foreign = other.constant(Tensor::scalar(1.0));
    assert!(matches!(t.exp(foreign), Err(AutodiffError::DisconnectedTape)));
    assert!(matches!(t.backward(foreign), Err(AutodiffError::DisconnectedTape)));

    let mut t = Tape::new();
    let v = t.param("v", Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(v), Err(AutodiffError::NotScalar(s)) if s == vec![2]));
}

#[test]
fn warn_policy_continues() {
    let mut t = Tape::with_policy(NanPolicy::Warn);
    let z = t.constant(Tensor::vector(vec![0.0]));
    let l = t.log(z).unwrap();
    assert_eq!(t.value(l).data()[0], f64::NEG_INFINITY);
}

#[test]
fn clamp_floor_has_no_gradient() {
    let mut t = Tape::new();
    let x = t.param("x", Tensor::vector(vec![-50.0, 2.0]));
    let c = t.clamp_min(x, 1e-4).unwrap();
    assert_eq!(t.value(c).data(), &[1e-4, 2.0]);
    let s = t.sum(c).unwrap();
    assert_eq!(t.backward(s).unwrap().named()["x"].data(), &[0.0, 1.0]);
}

#[test]
fn grad_check_detects_fresh_noise() {
    use std::cell::Cell;
    let calls = Cell::new(0u32);
    let mut params = ParamStore::new();
    params.insert("w", Tensor::vector(vec![0.5]));
    let f = |t: &mut Tape, v: &BTreeMap<String, Var>| {
        calls.set(calls.get() + 1);
        let noise = t.scalar(calls.get() as f64 * 1e-3);
        let y = t.add(v["w"], noise)?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    };
    let r = grad_check(f, &params, 1e-5).unwrap();
    assert!(!r.deterministic);
    assert!(r.max_rel_error.is_infinite());
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut t = Tape::new();
    let data = vec![0.3, -0.4, 1.2, 0.9, -2.0, 0.1];
    let x = t.param("x", Tensor::matrix(2, 3, data.clone()).unwrap());
    let a = t.layer_norm(x, 1e-5).unwrap();
    let b = t.segment_softmax(a, &[0, 0]).unwrap();
    let c = t.gather_rows(b, &[1, 1, 0]).unwrap();
    let d = t.scatter_add_rows(c, &[0, 1, 0], 2).unwrap();
    let e = t.elu(d).unwrap();
    let s = t.sum(e).unwrap();
    assert_eq!(t.value(x).data(), &data[..]);
    let _ = t.backward(s).unwrap();
}

#[test]
fn every_primitive_has_a_probe() {
    for name in PRIMITIVES {
        assert!(probe(name, 0).is_some(), "{name}");
    }
    assert!(probe("nope", 0).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitives_match_finite_differences(seed in any::<u64>()) {
        for name in PRIMITIVES {
            let r = probe(name, seed).unwrap().unwrap();
            prop_assert!(r.deterministic);
            prop_assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }
}
