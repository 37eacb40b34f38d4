//! Operation-level examples and finite-difference checks for every
//! differentiable op on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::tape::{AttnMask, Tape};
use super::tensor::{Params, Tensor};
use super::NumericsError;
use std::sync::Arc;

fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() < tol
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity_passthrough() {
    let mut tape = Tape::<f64>::new();
    let eye = tape
        .constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
        .unwrap();
    let m = tape
        .constant_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
        .unwrap();
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_selector_row() {
    let mut tape = Tape::<f64>::new();
    let sel = tape
        .constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0])
        .unwrap();
    let v = tape.constant_from(vec![2, 1], vec![5.0, 7.0]).unwrap();
    let out = tape.matmul(sel, v).unwrap();
    assert_eq!(tape.data(out), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant_from(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant_from(vec![2, 2], vec![0.0; 4]).unwrap();
    match tape.matmul(a, b).unwrap_err() {
        NumericsError::DimMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_grad_of_sum_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = Params::new();
    let a = ps.add("a", rand_tensor(&mut rng, vec![3, 4])).unwrap();
    let b_t = rand_tensor(&mut rng, vec![4, 2]);
    let b_data = b_t.data().to_vec();
    let b = ps.add("b", b_t).unwrap();

    let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
        let av = tape.param(params, a);
        let bv = tape.param(params, b);
        let prod = tape.matmul(av, bv)?;
        Ok(tape.sum_all(prod))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);

    // analytic dA = ones(3,2) @ B^T
    let mut tape = Tape::new();
    let av = tape.param(&ps, a);
    let bv = tape.param(&ps, b);
    let prod = tape.matmul(av, bv).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss, &mut ps).unwrap();
    let da = ps.get(a).tensor.grad().unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b_data[k * 2 + j]).sum();
            assert!(approx(da[i * 4 + k], expect, 1e-10));
        }
    }
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_symmetry_and_shift_invariance() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant_from(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let s = tape.softmax(a, 1).unwrap();
    assert_eq!(tape.data(s), &[0.5, 0.5]);

    let big = tape
        .constant_from(vec![1, 2], vec![1000.0, 1000.0])
        .unwrap();
    let s2 = tape.softmax(big, 1).unwrap();
    assert_eq!(tape.data(s2), &[0.5, 0.5]);
}

#[test]
fn softmax_of_log_odds() {
    let mut tape = Tape::<f64>::new();
    let a = tape
        .constant_from(vec![1, 2], vec![1.0f64.ln(), 3.0f64.ln()])
        .unwrap();
    let s = tape.softmax(a, 1).unwrap();
    assert!(approx(tape.data(s)[0], 0.25, 1e-12));
    assert!(approx(tape.data(s)[1], 0.75, 1e-12));
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(2..6);
        let t = rand_tensor(&mut rng, vec![rows, cols]);
        let shift: f64 = rng.gen_range(-5.0..5.0);
        let shifted = Tensor::new(
            vec![rows, cols],
            t.data().iter().map(|v| v + shift).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(&t);
        let b = tape.constant(&shifted);
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        for r in 0..rows {
            let sum: f64 = tape.data(sa)[r * cols..(r + 1) * cols].iter().sum();
            assert!(approx(sum, 1.0, 1e-6));
        }
        for (x, y) in tape.data(sa).iter().zip(tape.data(sb)) {
            assert!(approx(*x, *y, 1e-6));
        }
    }
}

// ── layer norm ──────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_is_zeros() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_from(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap();
    let g = tape.constant_from(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
    let b = tape.constant_from(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
    let out = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for v in tape.data(out) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_two_point_row_uses_population_variance() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_from(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let g = tape.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant_from(vec![2], vec![0.0, 0.0]).unwrap();
    let out = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(approx(tape.data(out)[0], -1.0, 1e-4));
    assert!(approx(tape.data(out)[1], 1.0, 1e-4));
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = Params::new();
    let x = ps.add("x", rand_tensor(&mut rng, vec![3, 5])).unwrap();
    let g = ps.add("g", rand_tensor(&mut rng, vec![5])).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, vec![5])).unwrap();
    let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
        let xv = tape.param(params, x);
        let gv = tape.param(params, g);
        let bv = tape.param(params, b);
        let ln = tape.layer_norm(xv, gv, bv, 1e-5)?;
        // weight the outputs so the gradient is not uniform
        let w: Vec<f64> = (0..15).map(|i| 0.1 * i as f64 - 0.6).collect();
        let wv = tape.constant_from(vec![3, 5], w)?;
        let prod = tape.mul(ln, wv)?;
        Ok(tape.sum_all(prod))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

// ── elementwise ─────────────────────────────────────────────────────────

#[test]
fn sigmoid_and_relu_point_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_from(vec![3], vec![0.0, -3.0, 3.0]).unwrap();
    let s = tape.sigmoid(x);
    assert!(approx(tape.data(s)[0], 0.5, 1e-12));
    let r = tape.relu(x);
    assert_eq!(tape.data(r), &[0.0, 0.0, 3.0]);
}

#[test]
fn gelu_gradcheck_at_listed_points() {
    for &point in &[-2.0, -0.1, 0.0, 0.1, 2.0] {
        let mut ps = Params::new();
        let x = ps
            .add("x", Tensor::new(vec![1], vec![point]).unwrap())
            .unwrap();
        let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
            let xv = tape.param(params, x);
            let g = tape.gelu(xv);
            Ok(tape.sum_all(g))
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "gelu at {point}: {}",
            report.max_rel_err
        );
    }
}

#[test]
fn add_broadcasts_leading_one_only() {
    let mut tape = Tape::<f64>::new();
    let a = tape
        .constant_from(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap();
    let bias = tape.constant_from(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
    let out = tape.add(a, bias).unwrap();
    assert_eq!(tape.data(out), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

    let bad = tape.constant_from(vec![2, 1], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        tape.add(a, bad).unwrap_err(),
        NumericsError::DimMismatch { .. }
    ));
}

#[test]
fn mul_gradcheck_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = Params::new();
    let a = ps.add("a", rand_tensor(&mut rng, vec![3, 4])).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, vec![1, 4])).unwrap();
    let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
        let av = tape.param(params, a);
        let bv = tape.param(params, b);
        let prod = tape.mul(av, bv)?;
        Ok(tape.sum_all(prod))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4);
}

// ── losses ──────────────────────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_logits_is_ln_v() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant_from(vec![1, 4], vec![0.3; 4]).unwrap();
    let loss = tape.cross_entropy_logits(logits, &[2], None).unwrap();
    assert!(approx(tape.scalar_value(loss), 4.0f64.ln(), 1e-12));
}

#[test]
fn cross_entropy_confident_logits_near_zero() {
    let mut tape = Tape::<f64>::new();
    let mut row = vec![0.0; 5];
    row[3] = 20.0;
    let logits = tape.constant_from(vec![1, 5], row).unwrap();
    let loss = tape.cross_entropy_logits(logits, &[3], None).unwrap();
    assert!(tape.scalar_value(loss) < 1e-6);
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grads() {
    let mut ps = Params::new();
    let l = ps
        .add("l", Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let lv = tape.param(&ps, l);
    let loss = tape.cross_entropy_logits(lv, &[9, 9], Some(9)).unwrap();
    assert_eq!(tape.scalar_value(loss), 0.0);
    tape.backward(loss, &mut ps).unwrap();
    assert!(ps.get(l).tensor.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn cross_entropy_out_of_range_target_errors() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant_from(vec![1, 3], vec![0.0; 3]).unwrap();
    assert!(matches!(
        tape.cross_entropy_logits(logits, &[5], None).unwrap_err(),
        NumericsError::TargetOutOfRange { .. }
    ));
}

#[test]
fn bce_examples() {
    let mut tape = Tape::<f64>::new();
    let half = tape.constant_from(vec![1], vec![0.5]).unwrap();
    let l1 = tape.bce(half, 1.0).unwrap();
    assert!(approx(tape.scalar_value(l1), 2.0f64.ln(), 1e-12));

    let near_one = tape.constant_from(vec![1], vec![1.0 - 1e-7]).unwrap();
    let l2 = tape.bce(near_one, 1.0).unwrap();
    assert!(tape.scalar_value(l2) < 1e-6);

    let p9 = tape.constant_from(vec![1], vec![0.9]).unwrap();
    let l3 = tape.bce(p9, 0.0).unwrap();
    assert!(approx(tape.scalar_value(l3), -(0.1f64.ln()), 1e-9));
    assert!(approx(tape.scalar_value(l3), 2.302585, 1e-5));
}

#[test]
fn bce_gradcheck() {
    for &(p0, t) in &[(0.3, 1.0), (0.7, 0.0), (0.5, 1.0)] {
        let mut ps = Params::new();
        let p = ps.add("p", Tensor::new(vec![1], vec![p0]).unwrap()).unwrap();
        let report = gradcheck::check(&mut ps, 1e-6, |params, tape| {
            let pv = tape.param(params, p);
            tape.bce(pv, t)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4);
    }
}

// ── backward contract ───────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones_and_disconnected_gives_zeros() {
    let mut ps = Params::new();
    let p = ps
        .add("p", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let q = ps
        .add("q", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let pv = tape.param(&ps, p);
    let loss = tape.sum_all(pv);
    tape.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.get(p).tensor.grad().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    assert_eq!(ps.get(q).tensor.grad().unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_on_non_scalar_is_contract_error() {
    let mut ps = Params::<f64>::new();
    let p = ps
        .add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let pv = tape.param(&ps, p);
    assert!(matches!(
        tape.backward(pv, &mut ps).unwrap_err(),
        NumericsError::NotScalar { .. }
    ));
}

#[test]
fn backward_accumulates_across_calls() {
    let mut ps = Params::new();
    let p = ps
        .add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let pv = tape.param(&ps, p);
    let loss = tape.sum_all(pv);
    tape.backward(loss, &mut ps).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.get(p).tensor.grad().unwrap(), &[2.0, 2.0]);
}

// ── masked softmax, gather, structural ops ─────────────────────────────

#[test]
fn masked_softmax_zeroes_masked_columns_exactly() {
    let mut tape = Tape::<f64>::new();
    let scores = tape
        .constant_from(vec![2, 4], vec![0.3, 1.0, -0.5, 2.0, 0.0, 0.0, 0.0, 0.0])
        .unwrap();
    let mask = AttnMask::Keys(Arc::new(vec![true, false, true, false]));
    let s = tape.masked_softmax(scores, mask).unwrap();
    let d = tape.data(s);
    assert_eq!(d[1], 0.0);
    assert_eq!(d[3], 0.0);
    assert!(approx(d[0] + d[2], 1.0, 1e-12));
    assert!(approx(d[4] + d[6], 1.0, 1e-12));
}

#[test]
fn causal_mask_blocks_future_columns() {
    let mut tape = Tape::<f64>::new();
    let scores = tape.constant_from(vec![3, 3], vec![0.1; 9]).unwrap();
    let s = tape.masked_softmax(scores, AttnMask::Causal).unwrap();
    let d = tape.data(s);
    assert_eq!(d[1], 0.0);
    assert_eq!(d[2], 0.0);
    assert_eq!(d[5], 0.0);
    assert!(approx(d[0], 1.0, 1e-12));
    assert!(approx(d[3] + d[4], 1.0, 1e-12));
}

#[test]
fn masked_softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = Params::new();
    let x = ps.add("x", rand_tensor(&mut rng, vec![3, 4])).unwrap();
    let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
        let xv = tape.param(params, x);
        let mask = AttnMask::Keys(Arc::new(vec![true, true, false, true]));
        let s = tape.masked_softmax(xv, mask)?;
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let wv = tape.constant_from(vec![3, 4], w)?;
        let prod = tape.mul(s, wv)?;
        Ok(tape.sum_all(prod))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4);
}

#[test]
fn embedding_gathers_and_scatters_gradient() {
    let mut ps = Params::new();
    let table = ps
        .add(
            "emb",
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        )
        .unwrap();
    let mut tape = Tape::new();
    let tv = tape.param(&ps, table);
    let rows = tape.embedding(tv, &[2, 0, 2]).unwrap();
    assert_eq!(tape.data(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let loss = tape.sum_all(rows);
    tape.backward(loss, &mut ps).unwrap();
    // row 2 used twice, row 0 once, row 1 never
    assert_eq!(
        ps.get(table).tensor.grad().unwrap(),
        &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
    );
}

#[test]
fn structural_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = Params::new();
    let a = ps.add("a", rand_tensor(&mut rng, vec![2, 4])).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, vec![3, 4])).unwrap();
    let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
        let av = tape.param(params, a);
        let bv = tape.param(params, b);
        let cat = tape.concat_rows(&[av, bv])?; // [5,4]
        let left = tape.slice_cols(cat, 0, 2)?; // [5,2]
        let right = tape.slice_cols(cat, 2, 2)?; // [5,2]
        let wide = tape.concat_cols(&[right, left])?; // [5,4]
        let head = tape.slice_rows(wide, 1, 3)?; // [3,4]
        let flat = tape.reshape(head, vec![4, 3])?;
        let t = tape.transpose(flat)?; // [3,4]
        let w: Vec<f64> = (0..12).map(|i| 0.05 * i as f64 - 0.3).collect();
        let wv = tape.constant_from(vec![3, 4], w)?;
        let prod = tape.mul(t, wv)?;
        Ok(tape.mean_all(prod))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel {}", report.max_rel_err);
}

/// Twenty random small tensors through a mixed expression, per the module
/// gradient-correctness property.
#[test]
fn random_small_tensor_gradcheck_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let m = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let n = rng.gen_range(1..4);
        let mut ps = Params::new();
        let a = ps.add("a", rand_tensor(&mut rng, vec![m, k])).unwrap();
        let b = ps.add("b", rand_tensor(&mut rng, vec![k, n])).unwrap();
        let c = ps.add("c", rand_tensor(&mut rng, vec![1, n])).unwrap();
        let report = gradcheck::check(&mut ps, 1e-5, |params, tape| {
            let av = tape.param(params, a);
            let bv = tape.param(params, b);
            let cv = tape.param(params, c);
            let h = tape.matmul(av, bv)?;
            let h = tape.add(h, cv)?;
            let h = tape.gelu(h);
            let s = tape.softmax(h, 1)?;
            let g = tape.sigmoid(s);
            Ok(tape.mean_all(g))
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "case {case}: rel err {}",
            report.max_rel_err
        );
    }
}

#[test]
fn forward_and_backward_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps = Params::new();
    let a = ps.add("a", rand_tensor(&mut rng, vec![4, 4])).unwrap();
    let mut tape = Tape::new();
    let av = tape.param(&ps, a);
    let s = tape.softmax(av, 1).unwrap();
    let ln_g = tape.constant_from(vec![4], vec![1.0; 4]).unwrap();
    let ln_b = tape.constant_from(vec![4], vec![0.0; 4]).unwrap();
    let ln = tape.layer_norm(s, ln_g, ln_b, 1e-5).unwrap();
    let loss = tape.mean_all(ln);
    tape.backward(loss, &mut ps).unwrap();
    assert!(ps.get(a).tensor.all_finite());
}
