use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Error;
use crate::tensor::Tensor;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_t64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Naive triple-loop product, the independent oracle for matmul.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let out = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    // Hand case from the oracle: [[1,2],[3,4]] x [[5],[6]] = [[17],[39]].
    assert_eq!(
        matmul_oracle(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1),
        vec![17.0, 39.0]
    );
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = tape.constant(vec![2, 1], vec![5.0, 6.0]);
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(out), &[17.0, 39.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (m, k, n) = (5, 4, 6);
    let a = random_t64(&mut rng, &[m, k]);
    let b = random_t64(&mut rng, &[k, n]);
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
    let out = tape.matmul(av, bv).unwrap();
    let oracle = matmul_oracle(&a.data, &b.data, m, k, n);
    for (got, want) in tape.data(out).iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn matmul_annihilates_zero() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let z = tape.constant(vec![2, 3], vec![0.0; 6]);
    let out = tape.matmul(a, z).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]);
    let b = tape.constant(vec![2, 2], vec![0.0; 4]);
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn conv2d_zero_sum_kernel_annihilates_constant() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 5, 5], vec![3.0; 25]);
    // Discrete Laplacian: zero sum.
    let w = tape.constant(
        vec![1, 1, 3, 3],
        vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    );
    let out = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(out), &[1, 3, 3]);
    assert!(tape.data(out).iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn conv2d_direct_summation_oracle() {
    // 3x3 input of all 2s, all-ones 3x3 kernel, pad 0 -> 9 * 2 = 18.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 3, 3], vec![2.0; 9]);
    let w = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]);
    let out = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(out), &[1, 1, 1]);
    assert_eq!(tape.data(out), &[18.0]);
}

#[test]
fn conv2d_unit_1x1_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_t64(&mut rng, &[2, 4, 4]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let w = tape.constant(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
    let out = tape.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(tape.data(out), x.data.as_slice());
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 5, 5], vec![0.0; 25]);
    let w = tape.constant(vec![1, 1, 2, 2], vec![0.0; 4]);
    assert!(matches!(
        tape.conv2d(x, w, None, 2, 0),
        Err(Error::Config { .. })
    ));
}

#[test]
fn softmax_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 5], vec![0.7; 5]);
    let y = tape.softmax(x, 1).unwrap();
    for &v in tape.data(y) {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_closed_form() {
    // softmax([0, ln 2]) = [1/3, 2/3].
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![2], vec![0.0, 2.0f64.ln()]);
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.data(y)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((tape.data(y)[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_t64(&mut rng, &[3, 4]);
    let shifted = Tensor::new(vec![3, 4], x.data.iter().map(|v| v + 11.25).collect()).unwrap();
    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.leaf(&x), tape.leaf(&shifted));
    let (ya, yb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
    for (u, v) in tape.data(ya).iter().zip(tape.data(yb)) {
        assert!((u - v).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3, 4], vals);
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.data(y).chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn layer_norm_constant_token_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 4], vec![2.5; 4]);
    let g = tape.constant(vec![4], vec![1.0; 4]);
    let b = tape.constant(vec![4], vec![0.0; 4]);
    let y = tape.layer_norm(x, g, b, 1, 1e-5).unwrap();
    assert!(tape.data(y).iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_two_point_token() {
    // Token [1,3]: mean 2, population std 1 -> [-1, 1] as eps -> 0.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 2], vec![1.0, 3.0]);
    let g = tape.constant(vec![2], vec![1.0; 2]);
    let b = tape.constant(vec![2], vec![0.0; 2]);
    let y = tape.layer_norm(x, g, b, 1, 1e-12).unwrap();
    assert!((tape.data(y)[0] + 1.0).abs() < 1e-6);
    assert!((tape.data(y)[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_beta_shifts_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_t64(&mut rng, &[3, 8]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let g = tape.constant(vec![8], vec![1.0; 8]);
    let b = tape.constant(vec![8], vec![5.0; 8]);
    let y = tape.layer_norm(xv, g, b, 1, 1e-12).unwrap();
    for row in tape.data(y).chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        assert!((mean - 5.0).abs() < 1e-9);
    }
}

#[test]
fn batch_norm_train_statistics() {
    use crate::params::BnState;
    // Channel values {1,3}: population stats give {-1, 1} before affine.
    let mut state = BnState::<f64>::new("bn", 1);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 1, 2], vec![1.0, 3.0]);
    let g = tape.constant(vec![1], vec![1.0]);
    let b = tape.constant(vec![1], vec![0.0]);
    let y = tape.batch_norm(x, g, b, &mut state, true, 0.1, 1e-12).unwrap();
    assert!((tape.data(y)[0] + 1.0).abs() < 1e-6);
    assert!((tape.data(y)[1] - 1.0).abs() < 1e-6);
    assert_eq!(state.batches_seen, 1);
    // Running stats moved toward (mean 2, var 1) with momentum 0.1.
    assert!((state.mean[0] - 0.2).abs() < 1e-12);
    assert!((state.var[0] - (0.9 + 0.1)).abs() < 1e-12);

    // Constant channel in train mode normalizes to zero.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 2, 2], vec![4.0; 4]);
    let g = tape.constant(vec![1], vec![1.0]);
    let b = tape.constant(vec![1], vec![0.0]);
    let y = tape.batch_norm(x, g, b, &mut state, true, 0.1, 1e-5).unwrap();
    assert!(tape.data(y).iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn batch_norm_eval_with_init_stats_is_identity() {
    use crate::params::BnState;
    let mut state = BnState::<f64>::new("bn", 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_t64(&mut rng, &[2, 3, 3]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let g = tape.constant(vec![2], vec![1.0; 2]);
    let b = tape.constant(vec![2], vec![0.0; 2]);
    let y = tape.batch_norm(xv, g, b, &mut state, false, 0.1, 0.0).unwrap();
    for (got, want) in tape.data(y).iter().zip(&x.data) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(state.batches_seen, 0);
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::<f64>::new();
    // Constant stays constant.
    let x = tape.constant(vec![1, 4, 4], vec![2.5; 16]);
    let y = tape.avg_pool2d(x, 2, 2).unwrap();
    assert!(tape.data(y).iter().all(|&v| (v - 2.5).abs() < 1e-15));
    // Global mean of [[1,2],[3,4]] is 2.5.
    let x = tape.constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = tape.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.data(y), &[2.5]);
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.data(y), &[2.5]);
    // k = 1 is the identity.
    let y = tape.avg_pool2d(x, 1, 1).unwrap();
    assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn bilinear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 3, 3], vec![1.5; 9]);
    let y = tape.upsample_bilinear(x, 2).unwrap();
    assert!(tape.data(y).iter().all(|&v| (v - 1.5).abs() < 1e-12));

    // Row [0,1] to length 4 with align-corners: [0, 1/3, 2/3, 1].
    let x = tape.constant(vec![1, 1, 2], vec![0.0, 1.0]);
    let y = tape.upsample_bilinear(x, 2).unwrap();
    let got = tape.data(y);
    let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }

    let x = tape.constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = tape.upsample_bilinear(x, 1).unwrap();
    assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn window_partition_four_windows_is_permutation() {
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let x = tape.constant(vec![1, 4, 4], data.clone());
    let w = tape.window_partition(x, 2, 0).unwrap();
    assert_eq!(tape.shape(w), &[4, 1, 2, 2]);
    let mut sorted = tape.data(w).to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(sorted, data);
    // First window is the top-left 2x2 block.
    assert_eq!(&tape.data(w)[..4], &[0.0, 1.0, 4.0, 5.0]);
}

#[test]
fn window_single_window_is_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_t64(&mut rng, &[3, 4, 4]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let w = tape.window_partition(xv, 4, 0).unwrap();
    assert_eq!(tape.shape(w), &[1, 3, 4, 4]);
    assert_eq!(tape.data(w), x.data.as_slice());
}

#[test]
fn window_round_trip_with_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_t64(&mut rng, &[2, 4, 4]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let w = tape.window_partition(xv, 2, 1).unwrap();
    let back = tape.window_merge(w, 4, 4, 2, 1).unwrap();
    assert_eq!(tape.data(back), x.data.as_slice());
}

proptest! {
    #[test]
    fn window_round_trip_is_bit_exact(seed in 0u64..1000, win_pow in 0usize..2, shift in 0usize..4) {
        let win = [2usize, 4][win_pow];
        let shift = shift % win;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_t64(&mut rng, &[2, 8, 8]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(&x);
        let w = tape.window_partition(xv, win, shift).unwrap();
        let back = tape.window_merge(w, 8, 8, win, shift).unwrap();
        prop_assert_eq!(tape.data(back), x.data.as_slice());
    }
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_t64(&mut rng, &[3, 3]).requires_grad();
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    let grad = tape.grad_of(xv);
    for (g, v) in grad.iter().zip(&x.data) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn backward_unused_leaf_has_zero_grad() {
    let mut tape = Tape::<f64>::new();
    let used = tape.leaf_data(vec![2], vec![1.0, 2.0], true);
    let unused = tape.leaf_data(vec![3], vec![1.0, 2.0, 3.0], true);
    let loss = tape.sum_all(used);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_of(unused), vec![0.0; 3]);
}

#[test]
fn repeated_backward_doubles_grads() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_data(vec![2], vec![2.0, -1.0], true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    let once = tape.grad_of(x);
    tape.backward(loss).unwrap();
    let twice = tape.grad_of(x);
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_data(vec![2], vec![1.0, 2.0], true);
    assert!(matches!(
        tape.backward(x),
        Err(Error::NonScalarLoss { .. })
    ));
}

#[test]
fn grad_accumulates_across_multiple_uses() {
    // y = sum(x) + sum(x) -> grad 2 everywhere.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_data(vec![3], vec![1.0, 2.0, 3.0], true);
    let s1 = tape.sum_all(x);
    let s2 = tape.sum_all(x);
    let loss = tape.add(s1, s2).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_of(x), vec![2.0; 3]);
}

#[test]
fn composite_conv_attention_mean_gradient_check() {
    // conv2d -> token self-attention -> mean, checked against central
    // differences in f64.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random_t64(&mut rng, &[1, 4, 4]);
    let w = random_t64(&mut rng, &[2, 1, 3, 3]);
    super::gradcheck::assert_grads_close(&[x, w], |tape, vars| {
        let y = tape.conv2d(vars[0], vars[1], None, 1, 1)?;
        let tok = tape.chw_to_tokens(y)?; // [16, 2]
        let scores = tape.matmul_nt(tok, tok)?;
        let attn = tape.softmax(scores, 1)?;
        let mixed = tape.matmul(attn, tok)?;
        Ok(tape.mean_all(mixed))
    });
}

#[test]
fn detach_cuts_gradient_flow() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_data(vec![2], vec![1.0, 2.0], true);
    let d = tape.detach(x);
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_of(x), vec![0.0; 2]);
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    use crate::exec::{set_mode, Mode};
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let a = random_t64(&mut rng, &[40, 30]);
    let b = random_t64(&mut rng, &[30, 50]);
    let run = |mode: Mode| {
        set_mode(mode);
        let mut tape = Tape::<f64>::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let out = tape.matmul(av, bv).unwrap();
        let data = tape.data(out).to_vec();
        set_mode(Mode::Parallel);
        data
    };
    assert_eq!(run(Mode::Parallel), run(Mode::Sequential));
}

#[test]
fn gather_rows_and_take_axis0() {
    let mut tape = Tape::<f64>::new();
    let table = tape.leaf_data(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0], true);
    let out = tape
        .gather_rows(table, Arc::new(vec![2usize, 0, 2]))
        .unwrap();
    assert_eq!(tape.data(out), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    let loss = tape.sum_all(out);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_of(table), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_data(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
    let row = tape.take_axis0(x, 1).unwrap();
    assert_eq!(tape.data(row), &[3.0, 4.0]);
    let loss = tape.sum_all(row);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_of(x), vec![0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn permute_round_trip_and_values() {
    let mut tape = Tape::<f64>::new();
    // [2,3] -> transpose -> [3,2]
    let x = tape.constant(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let y = tape.permute(x, &[1, 0]).unwrap();
    assert_eq!(tape.data(y), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    let back = tape.permute(y, &[1, 0]).unwrap();
    assert_eq!(tape.data(back), tape.data(x));
}

#[test]
fn finiteness_guard_catches_nan_in_debug() {
    // log of a negative value must never survive: clamp floor keeps it finite.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![2], vec![0.0, 0.5]);
    let y = tape.log_clamped(x, 1e-12);
    assert!(tape.data(y).iter().all(|v| v.is_finite()));
}

/// Shared gradient check over every primitive op at small shapes. Also used
/// by the acceptance suite through `verify::op_gradient_reports`.
#[test]
fn every_primitive_op_passes_gradient_check() {
    for (name, report) in crate::verify::op_gradient_reports().unwrap() {
        assert!(
            report.passes(1e-4, 1e-8),
            "{name}: rel {:.3e} abs {:.3e} worst {:?}",
            report.max_rel_err,
            report.max_abs_err,
            report.worst
        );
    }
}

#[test]
fn param_store_round_trip_through_tape() {
    use crate::params::ParamStore;
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", t64(&[2], &[1.0, 2.0]));
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let wv2 = tape.param(&store, w);
    assert_eq!(wv, wv2, "param leafing is cached per tape");
    let sq = tape.mul(wv, wv).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    tape.export_grads(&mut store).unwrap();
    assert_eq!(
        store.get(w).value.grad.as_ref().unwrap(),
        &vec![2.0, 4.0]
    );
}

#[test]
fn frozen_params_receive_no_grads() {
    use crate::params::ParamStore;
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", t64(&[2], &[1.0, 2.0]));
    let mut tape = Tape::new();
    let x = tape.leaf_data(vec![2], vec![3.0, 4.0], true);
    let wv = tape.param_frozen(&store, w);
    // Gradient still flows *through* the frozen weights to x.
    let prod = tape.mul(x, wv).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();
    tape.export_grads(&mut store).unwrap();
    assert_eq!(store.grad_l1(), 0.0);
    assert_eq!(tape.grad_of(x), vec![1.0, 2.0]);
}
