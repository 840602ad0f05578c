use std::f64::consts::LN_2;

use proptest::prelude::*;

use super::suite::check_primitives;
use super::*;
use crate::error::Error;

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_passes_vector_through() {
    let t = Tape::new();
    let i = t.leaf(Tensor::identity(2));
    let v = t.leaf(m(2, 1, &[3.5, -2.0]));
    let y = t.matmul(i, v).unwrap();
    assert_eq!(t.value(y).data(), &[3.5, -2.0]);
}

#[test]
fn matmul_two_by_two() {
    let t = Tape::new();
    let a = t.leaf(m(2, 2, &[1., 2., 3., 4.]));
    let b = t.leaf(m(2, 1, &[1., 1.]));
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y), m(2, 1, &[3., 7.]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let y = t.value(t.softmax(x).unwrap());
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = t.leaf(Tensor::new(vec![2], vec![0.0, LN_2]).unwrap());
    let y = t.value(t.softmax(x).unwrap());
    assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = t.leaf(Tensor::new(vec![3], vec![5.0, f64::NEG_INFINITY, 5.0]).unwrap());
    let y = t.value(t.softmax(x).unwrap());
    assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
}

#[test]
fn softmax_all_masked_is_rejected() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![f64::NEG_INFINITY; 2]).unwrap());
    let err = t.softmax(x).unwrap_err();
    assert!(matches!(err, Error::NoAdmissibleEntries { row: 0 }));
    assert!(err.to_string().contains("no admissible entries"));
}

#[test]
fn softmax_stable_for_large_logits() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![1000.0, 999.0, -1000.0]).unwrap());
    let y = t.value(t.softmax(x).unwrap());
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn bce_examples() {
    let t = Tape::new();
    let z = t.leaf(Tensor::scalar(0.0));
    let l = t.bce_with_logits(z, &[1.0], 1.0, None).unwrap();
    assert!((t.scalar_value(l) - LN_2).abs() < 1e-15);
    let l = t.bce_with_logits(z, &[0.0], 100.0, None).unwrap();
    assert!((t.scalar_value(l) - LN_2).abs() < 1e-15);
}

#[test]
fn bce_matches_naive_formula_and_survives_extreme_logits() {
    let t = Tape::new();
    let logits = [-3.0, 0.2, 4.0, 1.5];
    let targets = [0.0, 1.0, 1.0, 0.0];
    let pw = 5.0;
    let z = t.leaf(Tensor::new(vec![4], logits.to_vec()).unwrap());
    let l = t.bce_with_logits(z, &targets, pw, None).unwrap();
    let naive: f64 = logits
        .iter()
        .zip(&targets)
        .map(|(&z, &y)| {
            let s = 1.0 / (1.0 + (-z as f64).exp());
            -(pw * y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((t.scalar_value(l) - naive).abs() < 1e-12);

    let z = t.leaf(Tensor::new(vec![2], vec![800.0, -800.0]).unwrap());
    let l = t.bce_with_logits(z, &[0.0, 1.0], 1.0, None).unwrap();
    assert!((t.scalar_value(l) - 800.0).abs() < 1e-9);
}

#[test]
fn bce_rejects_non_binary_targets() {
    let t = Tape::new();
    let z = t.leaf(Tensor::scalar(0.0));
    assert!(matches!(
        t.bce_with_logits(z, &[0.5], 1.0, None),
        Err(Error::Domain(_))
    ));
}

#[test]
fn bce_all_masked_is_constant_zero() {
    let t = Tape::new();
    let z = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let l = t.bce_with_logits(z, &[f64::NAN, 3.0], 1.0, Some(&[0.0, 0.0])).unwrap();
    assert_eq!(t.scalar_value(l), 0.0);
    t.backward(l).unwrap();
    assert_eq!(t.grad(z).data(), &[0.0, 0.0]);
}

#[test]
fn cross_entropy_uniform_is_ln_c() {
    let t = Tape::new();
    let z = t.leaf(Tensor::zeros(&[3, 10]));
    let l = t.cross_entropy(z, &[0, 4, 9], None).unwrap();
    assert!((t.scalar_value(l) - 10f64.ln()).abs() < 1e-14);
}

#[test]
fn cross_entropy_vanishes_with_margin() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let t = Tape::new();
        let z = t.leaf(m(1, 3, &[0.0, margin, 0.0]));
        let l = t.scalar_value(t.cross_entropy(z, &[1], None).unwrap());
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-20);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    // 4×5 instance, expected value from log(Σ exp) − z_t evaluated term by term.
    let logits = [
        0.3, -1.2, 2.0, 0.0, 0.7, //
        -0.5, 0.5, 1.5, -2.0, 0.1, //
        1.1, 1.1, -0.3, 0.9, -1.0, //
        0.0, 0.2, 0.4, 0.6, 0.8,
    ];
    let targets = [2usize, 0, 3, 4];
    let mut expected = 0.0;
    for (i, &tgt) in targets.iter().enumerate() {
        let row = &logits[i * 5..(i + 1) * 5];
        let denom: f64 = row.iter().map(|v: &f64| v.exp()).sum();
        expected += -(row[tgt].exp() / denom).ln();
    }
    expected /= 4.0;
    let t = Tape::new();
    let z = t.leaf(m(4, 5, &logits));
    let l = t.cross_entropy(z, &targets, None).unwrap();
    assert!((t.scalar_value(l) - expected).abs() < 1e-14);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let t = Tape::new();
    let z = t.leaf(Tensor::zeros(&[1, 3]));
    assert!(matches!(t.cross_entropy(z, &[3], None), Err(Error::Domain(_))));
}

#[test]
fn backward_seeds_loss_with_one() {
    let t = Tape::new();
    let a = t.leaf(m(2, 2, &[1., 2., 3., 4.]));
    let l = t.mean(a);
    t.backward(l).unwrap();
    assert_eq!(t.grad(l).data(), &[1.0]);
    assert_eq!(t.grad(a).data(), &[0.25; 4]);
}

#[test]
fn backward_requires_scalar() {
    let t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(a), Err(Error::Contract(_))));
}

#[test]
fn backward_visits_only_ancestors_once() {
    let t = Tape::new();
    let a = t.leaf(Tensor::scalar(2.0));
    let unused = t.leaf(Tensor::scalar(5.0));
    let b = t.mul(a, a).unwrap();
    let c = t.add(b, a).unwrap();
    let _ = t.tanh(unused);
    let visited = t.backward(c).unwrap();
    assert_eq!(visited, 3);
    assert_eq!(t.grad(a).data(), &[5.0]);
    assert_eq!(t.grad(unused).data(), &[0.0]);
}

#[test]
fn gradients_accumulate_across_losses() {
    let t = Tape::new();
    let w = t.leaf(m(1, 3, &[0.4, -0.2, 1.3]));
    let x = t.leaf(m(3, 1, &[1.0, 2.0, -1.0]));
    let l1 = t.sum(t.tanh(t.matmul(w, x).unwrap()));
    let l2 = t.mean(t.mul(w, w).unwrap());
    t.backward(l1).unwrap();
    let g1 = t.grad(w);
    t.backward(l2).unwrap();
    let both = t.grad(w);

    let t2 = Tape::new();
    let w2 = t2.leaf(m(1, 3, &[0.4, -0.2, 1.3]));
    let l2b = t2.mean(t2.mul(w2, w2).unwrap());
    t2.backward(l2b).unwrap();
    let g2 = t2.grad(w2);
    for i in 0..3 {
        assert!((both.data()[i] - (g1.data()[i] + g2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn grad_check_linear_is_exact_scale() {
    let params = [m(2, 2, &[0.1, 0.2, -0.3, 0.4])];
    let r = grad_check(&params, 1e-5, |t, v| {
        let s = t.scale(v[0], 3.0);
        Ok(t.sum(s))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
}

#[test]
fn grad_check_constant_function_has_zero_gradients() {
    let params = [m(1, 2, &[1.0, 2.0])];
    let r = grad_check(&params, 1e-5, |t, _| Ok(t.leaf(Tensor::scalar(7.0)))).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert!(r.analytic[0].data().iter().all(|&g| g == 0.0));
    assert!(r.numeric[0].data().iter().all(|&g| g == 0.0));
}

#[test]
fn grad_check_rejects_non_scalar_and_bad_eps() {
    let params = [m(1, 2, &[1.0, 2.0])];
    assert!(matches!(
        grad_check(&params, 1e-5, |t, v| Ok(t.tanh(v[0]))),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        grad_check(&params, 1e-2, |t, v| Ok(t.sum(v[0]))),
        Err(Error::Contract(_))
    ));
}

#[test]
fn every_primitive_passes_finite_differences() {
    for check in check_primitives(11, 20, 1e-5).unwrap() {
        assert!(
            check.max_rel_error < 1e-4,
            "{} max rel error {}",
            check.name,
            check.max_rel_error
        );
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let t = Tape::new();
        let a = t.leaf(m(2, 3, &[0.1, 0.7, -0.3, 1.1, 0.0, -2.0]));
        let b = t.leaf(m(3, 2, &[0.5, -0.4, 0.2, 0.9, -1.3, 0.8]));
        let y = t.softmax(t.tanh(t.matmul(a, b).unwrap())).unwrap();
        t.value(y)
    };
    assert_eq!(run(), run());
}

#[test]
fn masked_softmax_entries_get_no_gradient() {
    let t = Tape::new();
    let x = t.leaf(m(2, 3, &[0.3, 2.0, -1.0, 0.0, 0.5, 0.25]));
    let masked = t.mask_cols(x, &[true, false, true]).unwrap();
    let y = t.softmax(masked).unwrap();
    let w = t.leaf(m(2, 3, &[1.0, 2.0, 3.0, -1.0, 4.0, 0.5]));
    let l = t.sum(t.mul(y, w).unwrap());
    t.backward(l).unwrap();
    let g = t.grad(x);
    assert_eq!(g.get(0, 1), 0.0);
    assert_eq!(g.get(1, 1), 0.0);
    let yv = t.value(y);
    assert_eq!(yv.get(0, 1), 0.0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        row in proptest::collection::vec(-30.0f64..30.0, 1..8),
        mask_bits in proptest::collection::vec(any::<bool>(), 8),
    ) {
        let n = row.len();
        let mut keep: Vec<bool> = mask_bits[..n].to_vec();
        keep[0] = true;
        let t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, n, row).unwrap());
        let y = t.value(t.softmax(t.mask_cols(x, &keep).unwrap()).unwrap());
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (j, v) in y.data().iter().enumerate() {
            prop_assert!(*v >= 0.0);
            if !keep[j] {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }
}
