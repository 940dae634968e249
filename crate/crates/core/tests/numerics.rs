use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umlab::numerics::{finite_diff_check, Tape, Tensor};
use umlab::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_small_example() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    let b = tape.constant(t(&[2, 1], &[5., 6.])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[17., 39.]);
    assert_eq!(tape.stats().macs, 4);
}

#[test]
fn matmul_identity_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 7], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let i = tape.constant(Tensor::eye(7)).unwrap();
    let y = tape.matmul(xv, i).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn matmul_rejects_mismatched_inner_extent() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn softmax_of_zero_and_ln2() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[0.0, 2f64.ln()])).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_over_first_axis_matches_transposed_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0., 1., 2., 3., 4., 5.])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    // Every column is softmax([a, a + 3]).
    let hi = 1.0 / (1.0 + (-3f64).exp());
    for c in 0..3 {
        assert!((v[3 + c] - hi).abs() < 1e-12);
        assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_excludes_entries_exactly() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1., 50., 2., 0., 0., 0.])).unwrap();
    let keep = [true, false, true, false, false, false];
    let y = tape.masked_softmax(x, Some(&keep)).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[1], 0.0);
    let e = 1.0 / (1.0 + 1f64.exp());
    assert!((v[0] - e).abs() < 1e-15);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn layer_norm_two_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
    let g = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
    let b = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn gelu_reference_points() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 10.0, -10.0])).unwrap();
    let y = tape.gelu(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!(v[2].abs() < 1e-6);
}

#[test]
fn gather_rows_duplicate_accumulates_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3, 1], &[1., 2., 3.]), true).unwrap();
    let y = tape.gather_rows(x, Arc::new(vec![0, 0, 2])).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().get_or_zeros(x);
    assert_eq!(g.data(), &[2.0, 0.0, 1.0]);
}

#[test]
fn gather_rows_out_of_range_is_an_index_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1], &[1., 2.])).unwrap();
    let err = tape.gather_rows(x, Arc::new(vec![2])).unwrap_err();
    assert!(matches!(err, Error::Index { index: 2, extent: 2, .. }));
}

#[test]
fn non_finite_leaf_is_rejected() {
    let mut tape = Tape::new();
    let err = tape.leaf(t(&[2], &[1.0, f64::NAN]), true).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn masked_mse_ignores_unlisted_rows() {
    let mut tape = Tape::new();
    let pred = tape.leaf(t(&[3, 2], &[1., 1., 100., -100., 3., 3.]), true).unwrap();
    let target = Arc::new(t(&[2, 2], &[0., 0., 0., 0.]));
    let loss = tape.masked_mse(pred, target, Arc::new(vec![0, 2])).unwrap();
    assert!((tape.value(loss).data()[0] - 5.0).abs() < 1e-12);
    let g = tape.backward(loss).unwrap().get_or_zeros(pred);
    assert_eq!(&g.data()[2..4], &[0.0, 0.0]);
    assert!((g.data()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn masked_mse_without_rows_reports_empty_support() {
    let mut tape = Tape::new();
    let pred = tape.leaf(Tensor::<f64>::zeros(&[2, 2]), true).unwrap();
    let target = Arc::new(Tensor::zeros(&[0, 2]));
    let err = tape.masked_mse(pred, target, Arc::new(vec![])).unwrap_err();
    assert!(matches!(err, Error::EmptyLossSupport));
}

#[test]
fn peak_bytes_bounds_live_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[8, 8], &mut rng), true).unwrap();
    let y = tape.matmul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let st = tape.stats();
    assert!(st.peak_bytes >= st.live_bytes);
    assert!(st.peak_bytes >= 2 * 64 * 8);
}

// Finite-difference agreement of every backward rule. Each case composes the
// op under test with a fixed random projection so that the scalar output
// exercises all output coordinates.
fn probe_weights(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0))
}

fn project(tape: &mut Tape<f64>, y: umlab::numerics::Var, seed: u64) -> umlab::Result<umlab::numerics::Var> {
    let n = tape.value(y).numel();
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(probe_weights(n, seed).reshape(&shape)?)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const FD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

fn check_op(seed: u64, shape: &[usize], f: impl Fn(&mut Tape<f64>, umlab::numerics::Var) -> umlab::Result<umlab::numerics::Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    let err = finite_diff_check(
        |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, seed)
        },
        &x,
        FD_EPS,
    )
    .unwrap();
    assert!(err < FD_TOL, "seed {seed}: relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fd_matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let b = random(&[4, 3], &mut rng);
        check_op(seed, &[2, 4], |tape, x| {
            let bv = tape.leaf(b.clone(), false)?;
            tape.matmul(x, bv)
        });
        check_op(seed, &[2, 4], |tape, x| tape.matmul_nt(x, x));
    }

    #[test]
    fn fd_elementwise(seed in any::<u64>()) {
        check_op(seed, &[3, 4], |tape, x| tape.gelu(x));
        check_op(seed, &[3, 4], |tape, x| tape.mul(x, x));
        check_op(seed, &[3, 4], |tape, x| tape.add(x, x));
        check_op(seed, &[3, 4], |tape, x| tape.scale(x, 0.7));
    }

    #[test]
    fn fd_softmax(seed in any::<u64>()) {
        check_op(seed, &[3, 5], |tape, x| tape.softmax(x, 1));
        check_op(seed, &[3, 5], |tape, x| tape.softmax(x, 0));
        let keep: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
        check_op(seed, &[3, 5], move |tape, x| tape.masked_softmax(x, Some(&keep)));
    }

    #[test]
    fn fd_layer_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let g = random(&[6], &mut rng);
        check_op(seed, &[4, 6], |tape, x| {
            let gv = tape.leaf(g.clone(), false)?;
            let bv = tape.leaf(Tensor::zeros(&[6]), false)?;
            tape.layer_norm(x, gv, bv, 1e-6)
        });
        // Gradient with respect to the affine parameters.
        check_op(seed, &[6], |tape, gam| {
            let xs = random(&[3, 6], &mut ChaCha8Rng::seed_from_u64(11));
            let xv = tape.leaf(xs, false)?;
            tape.layer_norm(xv, gam, gam, 1e-6)
        });
    }

    #[test]
    fn fd_structural(seed in any::<u64>()) {
        check_op(seed, &[4, 3], |tape, x| tape.gather_rows(x, Arc::new(vec![3, 0, 0, 2])));
        check_op(seed, &[4, 3], |tape, x| tape.gather(x, Arc::new(vec![11, 0, 5, 5, 7, 1]), &[2, 3]));
        check_op(seed, &[4, 3], |tape, x| {
            let a = tape.slice_cols(x, 1, 2)?;
            tape.concat_cols(&[a, x])
        });
        check_op(seed, &[4, 3], |tape, x| tape.concat_rows(&[x, x]));
        check_op(seed, &[4, 3], |tape, x| tape.segment_mean(x, Arc::new(vec![vec![0, 1], vec![3], vec![1, 2, 3]])));
        check_op(seed, &[2, 8], |tape, x| {
            let r = tape.reshape(x, &[4, 2, 2])?;
            tape.pixel_shuffle(r, 2)
        });
        check_op(seed, &[2, 8], |tape, x| {
            let r = tape.reshape(x, &[4, 4])?;
            tape.transpose(r)
        });
        check_op(seed, &[4], |tape, x| {
            let r = tape.reshape(x, &[1, 4])?;
            let m = tape.leaf(Tensor::zeros(&[3, 4]), false)?;
            tape.add_row(m, x).and_then(|y| tape.concat_rows(&[y, r]))
        });
    }

    #[test]
    fn fd_losses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let target = Arc::new(random(&[2, 3], &mut rng));
        let tgt = target.clone();
        let tape_check = |f: &dyn Fn(&mut Tape<f64>, umlab::numerics::Var) -> umlab::Result<umlab::numerics::Var>| {
            let x = random(&[4, 3], &mut ChaCha8Rng::seed_from_u64(seed));
            let err = finite_diff_check(f, &x, FD_EPS).unwrap();
            prop_assert!(err < FD_TOL, "relative error {}", err);
            Ok(())
        };
        tape_check(&|tape, x| tape.masked_mse(x, tgt.clone(), Arc::new(vec![1, 3])))?;
        tape_check(&|tape, x| tape.masked_l1(x, target.clone(), Arc::new(vec![0, 2])))?;
    }
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[4.2, 4.2, 4.2])).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_rows_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[5., 5., 5., -1., -1., -1.])).unwrap();
    let g = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gather_rows_identity_and_selection() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4, 2], &[0., 1., 2., 3., 4., 5., 6., 7.])).unwrap();
    let id = tape.gather_rows(x, Arc::new((0..4).collect())).unwrap();
    assert_eq!(tape.value(id), tape.value(x));
    let sel = tape.gather_rows(x, Arc::new(vec![2, 0])).unwrap();
    assert_eq!(tape.value(sel).data(), &[4., 5., 0., 1.]);
}

#[test]
fn finite_diff_of_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 4], &mut rng);
    let err = finite_diff_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn finite_diff_of_constant_is_exact() {
    let x = Tensor::<f64>::full(&[2, 2], 0.3);
    let err = finite_diff_check(
        |tape, v| {
            let z = tape.scale(v, 0.0)?;
            tape.sum(z)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = values.len().div_ceil(cols);
        let mut data = values.clone();
        data.resize(rows * cols, 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[rows, cols], &data)).unwrap();
        for axis in 0..2 {
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y).clone();
            prop_assert!(v.data().iter().all(|&p| p >= 0.0));
            if axis == 1 {
                for r in 0..rows {
                    let s: f64 = v.row(r).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            } else {
                for c in 0..cols {
                    let s: f64 = (0..rows).map(|r| v.at(&[r, c])).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    // The backward of a row gather is multiplication by the transposed
    // one-hot selection matrix S (S[i][index[i]] = 1).
    #[test]
    fn gather_rows_backward_is_scatter_add(n in 1usize..=8, d in 1usize..4, index in proptest::collection::vec(0usize..8, 1..12), seed in any::<u64>()) {
        let index: Vec<usize> = index.into_iter().map(|i| i % n).collect();
        let m = index.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let up = random(&[m, d], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[n, d], &mut rng), true).unwrap();
        let y = tape.gather_rows(x, Arc::new(index.clone())).unwrap();
        let w = tape.constant(up.clone()).unwrap();
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p).unwrap();
        let got = tape.backward(s).unwrap().get_or_zeros(x);
        let sel = Tensor::from_fn(&[m, n], |k| if index[k / n] == k % n { 1.0 } else { 0.0 });
        let mut oracle = Tape::new();
        let st = oracle.constant(sel).unwrap();
        let stt = oracle.transpose(st).unwrap();
        let u = oracle.constant(up).unwrap();
        let want = oracle.matmul(stt, u).unwrap();
        prop_assert_eq!(got.data(), oracle.value(want).data());
    }
}
