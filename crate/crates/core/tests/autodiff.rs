mod common;

use std::sync::Arc;

use common::{grad_check, random_tensor, rng};
use deeplinker::autodiff::{EngineError, Segments, SparseRows, Tape, Tensor, Var};
use proptest::prelude::*;

/// Reduces any op output to a scalar through a fixed random projection so
/// the gradient check exercises the full Jacobian.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.value(out).shape();
    let weights = random_tensor(&mut rng(seed), r, c, 1.0);
    let w = tape.constant(weights).unwrap();
    let prod = tape.hadamard(out, w).unwrap();
    tape.sum(prod).unwrap()
}

const PROBES: usize = 100;

#[test]
fn matmul_identity_and_scalar_rule() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let b = tape.param(Tensor::from_rows(&[&[3.0], &[4.0]])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &Tensor::from_rows(&[&[3.0], &[4.0]]));

    let mut tape = Tape::new();
    let a = tape.param(Tensor::scalar(2.0)).unwrap();
    let b = tape.param(Tensor::scalar(5.0)).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).item(), 10.0);
    let grads = tape.backward(c).unwrap();
    assert_eq!(grads.get(a).unwrap().item(), 5.0);
    assert_eq!(grads.get(b).unwrap().item(), 2.0);
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
    let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
    assert!(matches!(
        tape.matmul(a, b),
        Err(EngineError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let inputs = [random_tensor(&mut r, 3, 4, 1.0), random_tensor(&mut r, 4, 2, 1.0)];
    let check = grad_check(
        |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            project(t, c, 11)
        },
        &inputs,
        PROBES,
        2,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn segment_softmax_closed_forms() {
    let mut tape = Tape::new();
    let x = tape
        .constant(Tensor::column(vec![0.7, 0.7, 0.7, 0.7, 0.0, 3f64.ln()]))
        .unwrap();
    let seg = Arc::new(Segments::new(vec![0, 4, 6], (0..6).collect()).unwrap());
    let y = tape.segment_softmax(x, seg).unwrap();
    let y = tape.value(y).data();
    for v in &y[..4] {
        assert!((v - 0.25).abs() < 1e-15);
    }
    assert!((y[4] - 0.25).abs() < 1e-15);
    assert!((y[5] - 0.75).abs() < 1e-15);
}

#[test]
fn segment_softmax_rejects_empty_segment() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(vec![1.0, 2.0])).unwrap();
    let seg = Arc::new(Segments::new(vec![0, 2, 2], vec![0, 1]).unwrap());
    assert_eq!(
        tape.segment_softmax(x, seg).unwrap_err(),
        EngineError::EmptySegment(1)
    );
}

#[test]
fn segment_softmax_gradient_and_normalization() {
    let mut r = rng(3);
    let seg = Arc::new(Segments::new(vec![0, 3, 4, 9], (0..9).collect()).unwrap());
    let logits = random_tensor(&mut r, 9, 1, 3.0);
    {
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone()).unwrap();
        let y = tape.segment_softmax(x, seg.clone()).unwrap();
        for s in 0..seg.len() {
            let total: f64 = tape.value(y).data()[seg.span(s)].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
    let check = grad_check(
        |t, v| {
            let y = t.segment_softmax(v[0], seg.clone()).unwrap();
            project(t, y, 5)
        },
        &[logits],
        PROBES,
        4,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn leaky_relu_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);
    let id = tape.leaky_relu(x, 1.0).unwrap();
    assert_eq!(tape.value(id).data(), &[-1.0, 0.0, 2.0]);

    let input = random_tensor(&mut rng(6), 5, 6, 2.0);
    let near_kink = input.clone();
    let check = grad_check(
        |t, v| {
            let y = t.leaky_relu(v[0], 0.2).unwrap();
            project(t, y, 7)
        },
        &[input],
        PROBES,
        8,
        |_, k| near_kink.data()[k].abs() < 1e-6,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn elu_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(vec![0.0, -700.0, 1.5])).unwrap();
    let y = tape.elu(x).unwrap();
    let y = tape.value(y).data();
    assert_eq!(y[0], 0.0);
    assert!((y[1] + 1.0).abs() < 1e-12 && y[1] > -1.0 - 1e-15);
    assert_eq!(y[2], 1.5);

    let input = random_tensor(&mut rng(9), 4, 7, 3.0);
    let near_kink = input.clone();
    let check = grad_check(
        |t, v| {
            let y = t.elu(v[0]).unwrap();
            project(t, y, 10)
        },
        &[input],
        PROBES,
        11,
        |_, k| near_kink.data()[k].abs() < 1e-6,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0)).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);

    let a = tape.constant(Tensor::column(vec![1.0, 2.0, 3.0])).unwrap();
    let b = tape.constant(Tensor::column(vec![4.0, 5.0, 6.0])).unwrap();
    let h = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(h).data(), &[4.0, 10.0, 18.0]);

    let rows = tape
        .constant(Tensor::from_rows(&[&[1.0, 2.0], &[10.0, 20.0]]))
        .unwrap();
    let seg = Arc::new(Segments::contiguous(1, 2));
    let total = tape.segment_weighted_sum(rows, None, seg).unwrap();
    assert_eq!(tape.value(total).data(), &[11.0, 22.0]);
}

#[test]
fn sigmoid_is_finite_at_extremes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(vec![-800.0, 800.0])).unwrap();
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
}

#[test]
fn composite_ops_match_finite_differences() {
    let mut r = rng(12);
    let a = random_tensor(&mut r, 4, 3, 1.0);
    let b = random_tensor(&mut r, 4, 3, 1.0);
    let c = random_tensor(&mut r, 4, 2, 1.0);
    let inputs = [a, b, c];
    let gather: Arc<[usize]> = Arc::from(vec![3, 0, 0, 2, 1]);
    let mask: Arc<[f64]> = Arc::from(vec![0.0, 2.0, 1.0, 0.5, 2.0, 0.0, 1.0, 1.0, 3.0, 0.0, 1.0, 2.0]);
    let check = grad_check(
        |t, v| {
            let s = t.sigmoid(v[0]).unwrap();
            let h = t.hadamard(s, v[1]).unwrap();
            let m = t.mean(&[h, v[1]]).unwrap();
            let m = t.mask(m, mask.clone()).unwrap();
            let cat = t.concat_cols(&[m, v[2]]).unwrap();
            let g = t.gather_rows(cat, gather.clone()).unwrap();
            let sl = t.slice_rows(g, 1, 3).unwrap();
            let sc = t.scale(sl, -1.5).unwrap();
            let sum = t.add(sc, sl).unwrap();
            project(t, sum, 13)
        },
        &inputs,
        PROBES,
        14,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn segment_weighted_sum_gradient_with_shared_sources() {
    let mut r = rng(15);
    let values = random_tensor(&mut r, 5, 3, 1.0);
    let weights = random_tensor(&mut r, 7, 1, 1.0);
    let seg = Arc::new(Segments::new(vec![0, 3, 7], vec![0, 4, 4, 1, 2, 0, 3]).unwrap());
    let check = grad_check(
        |t, v| {
            let out = t.segment_weighted_sum(v[0], Some(v[1]), seg.clone()).unwrap();
            project(t, out, 16)
        },
        &[values, weights],
        PROBES,
        17,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn sparse_project_gradient() {
    let mut r = rng(18);
    let x = Arc::new(
        SparseRows::new(
            6,
            vec![0, 2, 2, 5],
            vec![0, 5, 1, 2, 5],
            vec![1.0, -2.0, 0.5, 1.0, 3.0],
        )
        .unwrap(),
    );
    let w = random_tensor(&mut r, 6, 4, 1.0);
    {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone()).unwrap();
        let y = tape.sparse_project(x.clone(), wv).unwrap();
        assert_eq!(tape.value(y), &x.to_dense().matmul(&w).unwrap());
    }
    let check = grad_check(
        |t, v| {
            let y = t.sparse_project(x.clone(), v[0]).unwrap();
            project(t, y, 19)
        },
        &[w],
        PROBES,
        20,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn cross_entropy_gradient() {
    let labels: Arc<[f64]> = Arc::from(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    let logits = random_tensor(&mut rng(21), 5, 1, 2.0);
    let check = grad_check(
        |t, v| {
            let p = t.sigmoid(v[0]).unwrap();
            t.binary_cross_entropy(p, labels.clone()).unwrap()
        },
        &[logits],
        PROBES,
        22,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
}

#[test]
fn logistic_loss_matches_chained_form() {
    let labels: Arc<[f64]> = Arc::from(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    let logits = random_tensor(&mut rng(23), 5, 1, 2.0);
    let check = grad_check(
        |t, v| t.logistic_loss(v[0], labels.clone()).unwrap(),
        std::slice::from_ref(&logits),
        PROBES,
        24,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);

    let mut fused = Tape::new();
    let z = fused.param(logits.clone()).unwrap();
    let a = fused.logistic_loss(z, labels.clone()).unwrap();
    let mut chained = Tape::new();
    let z2 = chained.param(logits).unwrap();
    let p = chained.sigmoid(z2).unwrap();
    let b = chained.binary_cross_entropy(p, labels).unwrap();
    assert!((fused.value(a).item() - chained.value(b).item()).abs() < 1e-12);
}

#[test]
fn logistic_loss_keeps_gradient_when_saturated() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::column(vec![-60.0, 60.0])).unwrap();
    let loss = tape.logistic_loss(z, Arc::from(vec![1.0, 0.0])).unwrap();
    // Both predictions are confidently wrong: the loss sits at the clamp.
    let clamped = -(1e-12f64).ln();
    // 1 - 1e-12 is not exact in f64, so the upper clamp differs slightly.
    assert!((tape.value(loss).item() - clamped).abs() < 1e-3);
    let g = tape.backward(loss).unwrap().get(z).unwrap().clone();
    assert!((g.data()[0] + 0.5).abs() < 1e-12);
    assert!((g.data()[1] - 0.5).abs() < 1e-12);
}

#[test]
fn backward_linear_and_accumulation_rules() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 4.0]])).unwrap();
    let loss = tape.sum(w).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &Tensor::filled(2, 2, 1.0));

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.add(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 2.0);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(2, 1)).unwrap();
    assert_eq!(
        tape.backward(x).unwrap_err(),
        EngineError::NonScalarLoss(2, 1)
    );
}

#[test]
fn backward_leaves_unreachable_params_untouched() {
    let mut tape = Tape::new();
    let used = tape.param(Tensor::scalar(2.0)).unwrap();
    let unused = tape.param(Tensor::scalar(7.0)).unwrap();
    let frozen = tape.constant(Tensor::scalar(5.0)).unwrap();
    let y = tape.hadamard(used, frozen).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(used).unwrap().item(), 5.0);
    assert!(grads.get(unused).is_none());
    assert!(grads.get(frozen).is_none());
}

#[test]
fn logistic_pipeline_gradient() {
    // y = sigmoid(w . x), the loss is y itself.
    let mut r = rng(23);
    let x = random_tensor(&mut r, 1, 6, 1.0);
    let w = random_tensor(&mut r, 6, 1, 1.0);
    let frozen_x = x.clone();
    let check = grad_check(
        |t, v| {
            let xv = t.constant(frozen_x.clone()).unwrap();
            let z = t.matmul(xv, v[0]).unwrap();
            t.sigmoid(z).unwrap()
        },
        &[w],
        PROBES,
        24,
        |_, _| false,
    );
    assert!(check.max_rel_err < 1e-5, "rel err {}", check.max_rel_err);
}

#[test]
fn non_finite_values_surface_as_errors() {
    let mut tape = Tape::new();
    let big = tape.constant(Tensor::scalar(1e200)).unwrap();
    assert_eq!(
        tape.hadamard(big, big).unwrap_err(),
        EngineError::NonFinite { op: "hadamard" }
    );
    assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(25);
        let a = random_tensor(&mut r, 6, 5, 1.0);
        let b = random_tensor(&mut r, 5, 3, 1.0);
        let mut tape = Tape::new();
        let av = tape.param(a).unwrap();
        let bv = tape.param(b).unwrap();
        let c = tape.matmul(av, bv).unwrap();
        let e = tape.elu(c).unwrap();
        let l = tape.sum(e).unwrap();
        let g = tape.backward(l).unwrap();
        (g.get(av).unwrap().clone(), g.get(bv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = logits.len();
        let seg = Arc::new(Segments::contiguous(1, n));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(logits.clone())).unwrap();
        let shifted = tape
            .constant(Tensor::column(logits.iter().map(|v| v + shift).collect()))
            .unwrap();
        let y = tape.segment_softmax(x, seg.clone()).unwrap();
        let ys = tape.segment_softmax(shifted, seg).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            prop_assert!(*a > 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
