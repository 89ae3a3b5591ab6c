use proptest::prelude::*;

use super::gradcheck::{check_op, fixture, fixture_in, FD_EPS};
use super::{Tape, TensorError};
use crate::rng::{Stream, StreamRng};

const OP_TOL: f64 = 1e-4;

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: {a} vs expected {e} (tol {tol})"
        );
    }
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
    let m = tape.constant(vec![3.0, -1.0, 2.0, 5.0], vec![2, 2]).unwrap();
    let out = tape.matmul(&eye, &m).unwrap();
    assert_eq!(tape.value(&out), tape.value(&m));
}

#[test]
fn matmul_hand_case() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let b = tape.constant(vec![1.0, 1.0], vec![2, 1]).unwrap();
    let out = tape.matmul(&a, &b).unwrap();
    assert_eq!(tape.value(&out), &[3.0, 7.0]);
}

#[test]
fn matmul_inner_dim_mismatch_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = tape.constant(vec![0.0; 8], vec![4, 2]).unwrap();
    assert!(matches!(
        tape.matmul(&a, &b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn matmul_gradient_5x7_7x3() {
    let report = check_op(
        &[(fixture(11, 35), vec![5, 7]), (fixture(12, 21), vec![7, 3])],
        |tape, leaves| tape.matmul(&leaves[0], &leaves[1]),
        12,
        101,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{:?}", report);
}

#[test]
fn matmul_gradient_all_flag_combinations() {
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let a_shape = if ta { vec![4, 3] } else { vec![3, 4] };
        let b_shape = if tb { vec![5, 4] } else { vec![4, 5] };
        let report = check_op(
            &[(fixture(21, 12), a_shape), (fixture(22, 20), b_shape)],
            |tape, leaves| tape.matmul_t(&leaves[0], &leaves[1], ta, tb),
            10,
            int_seed(ta, tb),
            FD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < OP_TOL, "ta={ta} tb={tb}: {report:?}");
    }
}

fn int_seed(a: bool, b: bool) -> u64 {
    200 + (a as u64) * 2 + (b as u64)
}

#[test]
fn matmul_gradient_batched_and_shared_rhs() {
    // Batched both sides: [2,3,4] x [2,4,2]
    let report = check_op(
        &[(fixture(31, 24), vec![2, 3, 4]), (fixture(32, 16), vec![2, 4, 2])],
        |tape, leaves| tape.matmul(&leaves[0], &leaves[1]),
        12,
        300,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");

    // Shared rank-2 rhs: [2,3,4] x [4,2]
    let report = check_op(
        &[(fixture(33, 24), vec![2, 3, 4]), (fixture(34, 8), vec![4, 2])],
        |tape, leaves| tape.matmul(&leaves[0], &leaves[1]),
        12,
        301,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

// ── conv2d / pooling ────────────────────────────────────────────────

#[test]
fn conv2d_identity_kernel() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(fixture(41, 16), vec![1, 1, 4, 4]).unwrap();
    let w = tape.constant(vec![1.0], vec![1, 1, 1, 1]).unwrap();
    let out = tape.conv2d(&x, &w, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    assert_eq!(tape.value(&out), tape.value(&x));
}

#[test]
fn conv2d_ones_sum_window() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(vec![1.0; 16], vec![1, 1, 4, 4]).unwrap();
    let w = tape.constant(vec![1.0; 4], vec![1, 1, 2, 2]).unwrap();
    let out = tape.conv2d(&x, &w, 2, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(&out), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn conv2d_kernel_larger_than_input_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(vec![0.0; 16], vec![1, 1, 4, 4]).unwrap();
    let w = tape.constant(vec![0.0; 36], vec![1, 1, 6, 6]).unwrap();
    assert!(matches!(
        tape.conv2d(&x, &w, 1, 0),
        Err(TensorError::ShapeMismatch { .. })
    ));
    // With enough padding the same kernel fits.
    assert!(tape.conv2d(&x, &w, 1, 1).is_ok());
}

#[test]
fn conv2d_gradient_strided() {
    let report = check_op(
        &[
            (fixture(51, 2 * 3 * 9 * 9), vec![2, 3, 9, 9]),
            (fixture(52, 4 * 3 * 3 * 3), vec![4, 3, 3, 3]),
        ],
        |tape, leaves| tape.conv2d(&leaves[0], &leaves[1], 2, 0),
        10,
        500,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn conv2d_gradient_padded() {
    let report = check_op(
        &[
            (fixture(53, 1 * 2 * 5 * 5), vec![1, 2, 5, 5]),
            (fixture(54, 3 * 2 * 3 * 3), vec![3, 2, 3, 3]),
        ],
        |tape, leaves| tape.conv2d(&leaves[0], &leaves[1], 2, 1),
        10,
        501,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn max_pool2d_forward_and_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape
        .constant(vec![1.0, 2.0, 5.0, 3.0, 4.0, 0.0, -1.0, 2.0, 7.0, 1.0, 0.0, 0.0, 2.0, 3.0, 1.0, 6.0], vec![1, 1, 4, 4])
        .unwrap();
    let out = tape.max_pool2d(&x, 2, 2).unwrap();
    assert_eq!(tape.value(&out), &[4.0, 5.0, 7.0, 6.0]);

    let report = check_op(
        &[(fixture(55, 2 * 2 * 6 * 6), vec![2, 2, 6, 6])],
        |tape, leaves| tape.max_pool2d(&leaves[0], 2, 2),
        10,
        502,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

// ── activations / pointwise ─────────────────────────────────────────

#[test]
fn softmax_uniform_rows() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(vec![0.0, 0.0, 0.0], vec![1, 3]).unwrap();
    let out = tape.softmax(&x, 1).unwrap();
    assert_close(tape.value(&out), &[1.0 / 3.0; 3], 1e-12);
}

#[test]
fn sigmoid_at_zero() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(vec![0.0], vec![1]).unwrap();
    let out = tape.sigmoid(&x).unwrap();
    assert_eq!(tape.value(&out), &[0.5]);
}

#[test]
fn gelu_gradient_at_random_points() {
    let report = check_op(
        &[(fixture(61, 20), vec![20])],
        |tape, leaves| tape.gelu(&leaves[0]),
        20,
        600,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn pointwise_gradients() {
    // (name, builder, input domain)
    let cases: Vec<(&str, fn(&mut Tape<f64>, &super::Tensor) -> super::Result<super::Tensor>, Vec<f64>)> = vec![
        ("exp", |t, x| t.exp(x), fixture(62, 16)),
        ("log", |t, x| t.log(x), fixture_in(63, 16, 0.2, 3.0)),
        ("sqrt", |t, x| t.sqrt(x), fixture_in(64, 16, 0.2, 3.0)),
        ("abs", |t, x| t.abs(x), fixture_in(65, 16, 0.1, 2.0)),
        ("relu", |t, x| t.relu(x), fixture(66, 16)),
        ("sigmoid", |t, x| t.sigmoid(x), fixture(67, 16)),
        ("affine", |t, x| t.affine(x, 2.5, -0.75), fixture(68, 16)),
        ("pow2", |t, x| t.pow_scalar(x, 2.0), fixture(69, 16)),
        ("pow1_5", |t, x| t.pow_scalar(x, 1.5), fixture_in(70, 16, 0.2, 2.0)),
    ];
    for (name, build, data) in cases {
        let report = check_op(
            &[(data, vec![4, 4])],
            |tape, leaves| build(tape, &leaves[0]),
            16,
            700,
            FD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < OP_TOL, "{name}: {report:?}");
    }
}

#[test]
fn binary_gradients_with_broadcast() {
    type B = fn(&mut Tape<f64>, &super::Tensor, &super::Tensor) -> super::Result<super::Tensor>;
    let ops: Vec<(&str, B)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    // same-shape, scalar rhs, and extent-1 broadcast
    let shapes: Vec<(Vec<usize>, Vec<usize>)> = vec![
        (vec![3, 4], vec![3, 4]),
        (vec![3, 4], vec![1]),
        (vec![3, 4], vec![1, 4]),
        (vec![2, 3, 4], vec![2, 1, 4]),
    ];
    for (name, build) in &ops {
        for (sa, sb) in &shapes {
            let na: usize = sa.iter().product();
            let nb: usize = sb.iter().product();
            // keep divisors away from zero
            let bdata = fixture_in(77, nb, 0.5, 2.0);
            let report = check_op(
                &[(fixture(76, na), sa.clone()), (bdata, sb.clone())],
                |tape, leaves| build(tape, &leaves[0], &leaves[1]),
                12,
                800,
                FD_EPS,
            )
            .unwrap();
            assert!(report.max_rel_err < OP_TOL, "{name} {sa:?}x{sb:?}: {report:?}");
        }
    }
}

#[test]
fn incompatible_broadcast_is_shape_error() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
    assert!(matches!(tape.add(&a, &b), Err(TensorError::ShapeMismatch { .. })));
}

// ── normalization / shape ops ───────────────────────────────────────

#[test]
fn layer_norm_gradient() {
    let report = check_op(
        &[
            (fixture(81, 2 * 3 * 8), vec![2, 3, 8]),
            (fixture_in(82, 8, 0.5, 1.5), vec![8]),
            (fixture(83, 8), vec![8]),
        ],
        |tape, leaves| tape.layer_norm(&leaves[0], &leaves[1], &leaves[2], 1e-5),
        16,
        900,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(fixture(84, 4 * 6), vec![4, 6]).unwrap();
    let gain = tape.constant(vec![1.0; 6], vec![6]).unwrap();
    let bias = tape.constant(vec![0.0; 6], vec![6]).unwrap();
    let out = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
    for row in tape.value(&out).chunks(6) {
        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_op_gradients() {
    // reshape -> permute -> slice -> concat -> broadcast chain
    let report = check_op(
        &[(fixture(91, 24), vec![2, 3, 4]), (fixture(92, 8), vec![2, 4])],
        |tape, leaves| {
            let r = tape.reshape(&leaves[0], vec![6, 4])?;
            let p = tape.permute(&r, &[1, 0])?; // [4,6]
            let s = tape.slice(&p, 1, 1, 2)?; // [4,2]
            let t = tape.transpose(&s)?; // [2,4]
            let c = tape.concat(&[t, leaves[1].clone()], 0)?; // [4,4]
            let b = tape.reshape(&c, vec![1, 4, 4])?;
            tape.broadcast_to(&b, vec![3, 4, 4])
        },
        16,
        910,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn reduce_gradients() {
    for axis in [None, Some(0), Some(1), Some(2)] {
        for mean in [false, true] {
            let report = check_op(
                &[(fixture(93, 24), vec![2, 3, 4])],
                |tape, leaves| {
                    if mean {
                        tape.reduce_mean(&leaves[0], axis)
                    } else {
                        tape.reduce_sum(&leaves[0], axis)
                    }
                },
                12,
                920,
                FD_EPS,
            )
            .unwrap();
            assert!(report.max_rel_err < OP_TOL, "axis {axis:?} mean {mean}: {report:?}");
        }
    }
}

#[test]
fn reduce_axis_out_of_range() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    assert!(matches!(
        tape.reduce_sum(&x, Some(2)),
        Err(TensorError::AxisOutOfRange { .. })
    ));
    assert!(matches!(
        tape.softmax(&x, 5),
        Err(TensorError::AxisOutOfRange { .. })
    ));
}

#[test]
fn lookup_gradients() {
    let report = check_op(
        &[(fixture(94, 5 * 3), vec![5, 3])],
        |tape, leaves| tape.embedding_lookup(&leaves[0], &[0, 2, 2, 4]),
        15,
        930,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");

    let report = check_op(
        &[(fixture(95, 4 * 6), vec![4, 6])],
        |tape, leaves| tape.select_columns(&leaves[0], &[1, 0, 5, 2]),
        16,
        931,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn softmax_log_softmax_gradients() {
    for axis in [0usize, 1] {
        let report = check_op(
            &[(fixture(96, 4 * 5), vec![4, 5])],
            |tape, leaves| tape.softmax(&leaves[0], axis),
            15,
            940 + axis as u64,
            FD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < OP_TOL, "softmax axis {axis}: {report:?}");

        let report = check_op(
            &[(fixture(97, 4 * 5), vec![4, 5])],
            |tape, leaves| tape.log_softmax(&leaves[0], axis),
            15,
            950 + axis as u64,
            FD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < OP_TOL, "log_softmax axis {axis}: {report:?}");
    }
}

#[test]
fn dropout_gradient_fixed_mask() {
    // The mask is regenerated identically on every forward rebuild, so the
    // finite-difference probe differentiates through a fixed mask.
    let report = check_op(
        &[(fixture(98, 32), vec![32])],
        |tape, leaves| {
            let mut rng = StreamRng::new(77, Stream::Dropout);
            tape.dropout(&leaves[0], 0.4, &mut rng)
        },
        16,
        960,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn dropout_zero_rate_is_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(fixture(99, 16), vec![16]).unwrap();
    let mut rng = StreamRng::new(0, Stream::Dropout);
    let out = tape.dropout(&x, 0.0, &mut rng).unwrap();
    assert_eq!(tape.value(&out), tape.value(&x));
}

// ── backward contract ───────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(fixture(101, 12), vec![3, 4], true).unwrap();
    let loss = tape.reduce_sum(&x, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[1.0; 12]);
}

#[test]
fn backward_sum_of_squares_gives_2x() {
    let mut tape: Tape<f64> = Tape::new();
    let data = fixture(102, 10);
    let x = tape.leaf(data.clone(), vec![10], true).unwrap();
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.reduce_sum(&sq, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
    assert_close(grads.get(&x).unwrap(), &expected, 1e-12);
}

#[test]
fn backward_requires_scalar() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let y = tape.mul(&x, &x).unwrap();
    assert!(matches!(
        tape.backward(&y),
        Err(TensorError::NotScalar { numel: 2 })
    ));
}

#[test]
fn unreachable_leaf_has_no_grad() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let orphan = tape.leaf(vec![5.0], vec![1], true).unwrap();
    let loss = tape.reduce_sum(&x, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert!(grads.get(&x).is_some());
    assert!(grads.get(&orphan).is_none());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(fixture(103, 6 * 8), vec![6, 8], true).unwrap();
        let b = tape.leaf(fixture(104, 8 * 4), vec![8, 4], true).unwrap();
        let mm = tape.matmul(&a, &b).unwrap();
        let act = tape.gelu(&mm).unwrap();
        let sm = tape.softmax(&act, 1).unwrap();
        let loss = tape.reduce_mean(&sm, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        (
            grads.get(&a).unwrap().to_vec(),
            grads.get(&b).unwrap().to_vec(),
        )
    };
    let (ga1, gb1) = run();
    let (ga2, gb2) = run();
    assert!(ga1.iter().zip(&ga2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(gb1.iter().zip(&gb2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn foreign_tensor_rejected() {
    let mut t1: Tape<f64> = Tape::new();
    let mut t2: Tape<f64> = Tape::new();
    let a = t1.constant(vec![1.0], vec![1]).unwrap();
    let b = t2.constant(vec![1.0], vec![1]).unwrap();
    assert!(matches!(t1.add(&a, &b), Err(TensorError::ForeignTensor { .. })));
}

#[test]
fn finite_checks_catch_log_of_negative() {
    let mut tape: Tape<f64> = Tape::new().with_finite_checks();
    let x = tape.constant(vec![-1.0], vec![1]).unwrap();
    assert!(matches!(tape.log(&x), Err(TensorError::NonFinite { .. })));
}

// ── properties ──────────────────────────────────────────────────────

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in 0u64..1000) {
        let data = fixture(seed, rows * cols).iter().map(|v| v * 10.0).collect::<Vec<_>>();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(data, vec![rows, cols]).unwrap();
        let s = tape.softmax(&x, 1).unwrap();
        for row in tape.value(&s).chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reshape_preserves_data(n in 1usize..40, seed in 0u64..1000) {
        let data = fixture(seed, n);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(data.clone(), vec![n]).unwrap();
        let r = tape.reshape(&x, vec![1, n]).unwrap();
        prop_assert_eq!(tape.value(&r), &data[..]);
    }

    #[test]
    fn permute_roundtrips(seed in 0u64..1000) {
        let data = fixture(seed, 2 * 3 * 4);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(data.clone(), vec![2, 3, 4]).unwrap();
        let p = tape.permute(&x, &[2, 0, 1]).unwrap();
        let back = tape.permute(&p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.value(&back), &data[..]);
    }
}
