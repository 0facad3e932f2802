use super::gradcheck::{central_diff, max_rel_err, FD_STEP, FD_TOL};
use super::{Parameter, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Analytic vs central-difference gradients for a scalar-valued builder over
/// named parameter tensors. The numeric side re-runs the forward closure and
/// never touches backward.
fn check_grads(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let params: Vec<Parameter> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| Parameter::new(format!("p{i}"), t.clone()))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf_param(p)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let grads = tape.take_param_grads();

    let run = |flat: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let chunk = &flat[offset..offset + t.numel()];
                offset += t.numel();
                tape.input(Tensor::new(t.shape().to_vec(), chunk.to_vec()).unwrap())
            })
            .collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let numeric = central_diff(run, &flat, FD_STEP);

    let mut offset = 0;
    for (i, t) in inputs.iter().enumerate() {
        let name = format!("p{i}");
        let analytic = &grads.iter().find(|(n, _)| *n == name).unwrap().1;
        let num = &numeric[offset..offset + t.numel()];
        offset += t.numel();
        let err = max_rel_err(analytic, num);
        assert!(err < FD_TOL, "param {name}: rel err {err}");
    }
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(7);
    for &(m, k, n) in &[(2usize, 3usize, 2usize), (5, 4, 3), (1, 6, 1), (7, 1, 5)] {
        let a = rand_tensor(&[m, k], &mut r);
        let b = rand_tensor(&[k, n], &mut r);
        let mut oracle = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                oracle[i * n + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.input(a);
        let bv = tape.input(b);
        let c = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(&oracle) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(vec![2, 3]));
    let b = tape.input(Tensor::zeros(vec![4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn group_matmul_matches_per_group_oracle() {
    let mut r = rng(11);
    let (g, rows, k, n) = (3usize, 4usize, 5usize, 2usize);
    let x = rand_tensor(&[g * rows, k], &mut r);
    let w = rand_tensor(&[g, k, n], &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = tape.input(w.clone());
    let out = tape.group_matmul(xv, wv).unwrap();
    for gi in 0..g {
        let mut tape2 = Tape::new();
        let xs = tape2.input(
            Tensor::matrix(rows, k, x.data()[gi * rows * k..(gi + 1) * rows * k].to_vec()).unwrap(),
        );
        let ws = tape2.input(
            Tensor::matrix(k, n, w.data()[gi * k * n..(gi + 1) * k * n].to_vec()).unwrap(),
        );
        let o = tape2.matmul(xs, ws).unwrap();
        let want = tape2.value(o).data();
        let got = &tape.value(out).data()[gi * rows * n..(gi + 1) * rows * n];
        assert_eq!(got, want);
    }
}

#[test]
fn pointwise_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![3], vec![0.0, -1.0, 0.0]).unwrap());
    let s = tape.sigmoid(x).unwrap();
    let t = tape.tanh(x).unwrap();
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert_eq!(tape.value(t).data()[0], 0.0);
    assert_eq!(tape.value(r).data()[1], 0.0);
}

#[test]
fn broadcast_add_and_rejection() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let bias = tape.input(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap());
    let out = tape.add(a, bias).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

    let sc = tape.input(Tensor::scalar(2.0));
    let scaled = tape.mul(a, sc).unwrap();
    assert_eq!(tape.value(scaled).data()[5], 12.0);

    let b = tape.input(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn concat_rejects_mismatched_off_axis_dims() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(vec![2, 3]));
    let b = tape.input(Tensor::zeros(vec![3, 3]));
    assert!(tape.concat(&[a, b], 1).is_err());
    assert!(tape.concat(&[a, b], 0).is_ok());
}

#[test]
fn gather_and_segment_sum_small_cases() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.gather_rows(x, &[2, 0, 0]).unwrap();
    assert_eq!(tape.value(g).data(), &[3.0, 1.0, 1.0]);

    let s = tape.segment_sum(x, &[0, 0, 1], 2).unwrap();
    assert_eq!(tape.value(s).data(), &[3.0, 3.0]);

    assert!(matches!(
        tape.gather_rows(x, &[3]),
        Err(TensorError::IndexOutOfRange { .. })
    ));
    assert!(matches!(
        tape.segment_sum(x, &[0, 2, 1], 2),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn row_softmax_rows_sum_to_one() {
    let mut r = rng(3);
    let x = rand_tensor(&[4, 5], &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = tape.row_softmax(xv).unwrap();
    for row in tape.value(y).data().chunks(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn masked_row_softmax_zeroes_masked_entries() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::matrix(2, 3, vec![1.0, 5.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let masked = vec![false, true, false, true, false, false];
    let y = tape.masked_row_softmax(x, &masked).unwrap();
    let d = tape.value(y).data();
    assert_eq!(d[1], 0.0);
    assert_eq!(d[3], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    assert!((d[0] - 0.5).abs() < 1e-12);
    assert!((d[4] - 0.5).abs() < 1e-12 && (d[5] - 0.5).abs() < 1e-12);

    let all = vec![true, true, true, false, false, false];
    assert!(tape.masked_row_softmax(x, &all).is_err());
}

#[test]
fn composite_three_layer_gradient_matches_finite_differences() {
    let mut r = rng(19);
    let w1 = rand_tensor(&[3, 4], &mut r);
    let b1 = rand_tensor(&[4], &mut r);
    let w2 = rand_tensor(&[4, 4], &mut r);
    let w3 = rand_tensor(&[4, 2], &mut r);
    let x = rand_tensor(&[5, 3], &mut r);
    check_grads(&[w1, b1, w2, w3], |tape, vars| {
        let xv = tape.input(x.clone());
        let h1 = tape.matmul(xv, vars[0]).unwrap();
        let h1 = tape.add(h1, vars[1]).unwrap();
        let h1 = tape.tanh(h1).unwrap();
        let h2 = tape.matmul(h1, vars[2]).unwrap();
        let h2 = tape.sigmoid(h2).unwrap();
        let h3 = tape.matmul(h2, vars[3]).unwrap();
        let h3 = tape.abs(h3).unwrap();
        tape.sum_all(h3).unwrap()
    });
}

#[test]
fn structured_op_gradients_match_finite_differences() {
    let mut r = rng(23);
    let x = rand_tensor(&[4, 3], &mut r);
    // gather + segment + scale_rows + concat + softmax in one graph
    check_grads(&[x], |tape, vars| {
        let g = tape.gather_rows(vars[0], &[0, 2, 2, 1]).unwrap();
        let s = tape.segment_sum(g, &[1, 0, 1, 1], 2).unwrap();
        let sr = tape.scale_rows(s, &[0.5, -1.5]).unwrap();
        let c = tape.concat(&[sr, s], 1).unwrap();
        let sm = tape.row_softmax(c).unwrap();
        let t = tape.transpose2d(sm).unwrap();
        tape.sum_all(t).unwrap()
    });

    let y = rand_tensor(&[2, 3, 2], &mut r);
    check_grads(&[y.clone()], |tape, vars| {
        let p = tape.permute_axes(vars[0], &[1, 0, 2]).unwrap();
        let rshp = tape.reshape(p, vec![3, 4]).unwrap();
        let sq = tape.mul(rshp, rshp).unwrap();
        tape.sum_all(sq).unwrap()
    });

    let w = rand_tensor(&[2, 2, 3], &mut r);
    let xx = rand_tensor(&[4, 2], &mut r);
    check_grads(&[w, xx], |tape, vars| {
        let o = tape.group_matmul(vars[1], vars[0]).unwrap();
        let o = tape.tanh(o).unwrap();
        tape.sum_all(o).unwrap()
    });
}

#[test]
fn off_path_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let used = Parameter::new("used", Tensor::scalar(2.0));
    let unused = Parameter::new("unused", Tensor::scalar(5.0));
    let uv = tape.leaf_param(&used);
    let _nv = tape.leaf_param(&unused);
    let loss = tape.mul(uv, uv).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.take_param_grads();
    let unused_grad = &grads.iter().find(|(n, _)| n == "unused").unwrap().1;
    assert_eq!(unused_grad.as_slice(), &[0.0]);
    let used_grad = &grads.iter().find(|(n, _)| n == "used").unwrap().1;
    assert!((used_grad[0] - 4.0).abs() < 1e-12);
}

#[test]
fn stacked_leaf_splits_gradients_per_parameter() {
    let p0 = Parameter::new("n0", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let p1 = Parameter::new("n1", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
    let mut tape = Tape::new();
    let stacked = tape.leaf_params_stacked(&[&p0, &p1]).unwrap();
    assert_eq!(tape.value(stacked).shape(), &[2, 1, 2]);
    let flat = tape.reshape(stacked, vec![1, 4]).unwrap();
    let w = tape.input(Tensor::matrix(4, 1, vec![1.0, 10.0, 100.0, 1000.0]).unwrap());
    let loss = tape.matmul(flat, w).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.take_param_grads();
    assert_eq!(grads.iter().find(|(n, _)| n == "n0").unwrap().1, vec![1.0, 10.0]);
    assert_eq!(grads.iter().find(|(n, _)| n == "n1").unwrap().1, vec![100.0, 1000.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(vec![2, 2]));
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[cfg(debug_assertions)]
#[test]
fn non_finite_result_is_reported_in_debug() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::scalar(1e308));
    let doubled = tape.scale(x, 4.0);
    assert!(matches!(doubled, Err(TensorError::NonFinite { op: "scale" })));
}

#[test]
fn replay_is_bitwise_deterministic() {
    let mut r = rng(41);
    let a = rand_tensor(&[6, 5], &mut r);
    let b = rand_tensor(&[5, 4], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let av = tape.input(a.clone());
        let bv = tape.input(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sigmoid(c).unwrap();
        let l = tape.sum_all(s).unwrap();
        (tape.value(c).data().to_vec(), tape.value(l).item())
    };
    let (c1, l1) = run();
    let (c2, l2) = run();
    assert_eq!(c1, c2);
    assert!(l1.to_bits() == l2.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every primitive with smooth local behaviour matches central finite
    /// differences on random small inputs.
    #[test]
    fn primitive_gradients_match_finite_differences(
        seed in 0u64..1_000,
        m in 1usize..5,
        n in 1usize..5,
    ) {
        let mut r = rng(seed);
        let x = rand_tensor(&[m, n], &mut r);
        // keep relu/abs away from their kinks so differences are two-sided
        let x = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| if v.abs() < 5e-2 { v + 0.1 } else { v }).collect(),
        ).unwrap();
        let w = rand_tensor(&[n, 3], &mut r);

        check_grads(&[x.clone(), w.clone()], |tape, vars| {
            let h = tape.matmul(vars[0], vars[1]).unwrap();
            let h = tape.sigmoid(h).unwrap();
            tape.sum_all(h).unwrap()
        });
        check_grads(&[x.clone()], |tape, vars| {
            let h = tape.relu(vars[0]).unwrap();
            tape.sum_all(h).unwrap()
        });
        check_grads(&[x.clone()], |tape, vars| {
            let h = tape.abs(vars[0]).unwrap();
            tape.sum_all(h).unwrap()
        });
        check_grads(&[x.clone()], |tape, vars| {
            let h = tape.tanh(vars[0]).unwrap();
            let h = tape.row_softmax(h).unwrap();
            let probe = tape.input(rand_tensor(&[m, n], &mut rng(seed ^ 0x9e37)));
            let h = tape.mul(h, probe).unwrap();
            tape.sum_all(h).unwrap()
        });
        check_grads(&[x.clone(), x.clone()], |tape, vars| {
            let s = tape.sub(vars[0], vars[1]).unwrap();
            let p = tape.add(s, vars[1]).unwrap();
            let q = tape.mul(p, vars[0]).unwrap();
            let q = tape.scale(q, 0.75).unwrap();
            tape.sum_all(q).unwrap()
        });
    }

    /// Segment sum is invariant to permuting rows together with their targets.
    #[test]
    fn segment_sum_permutation_invariance(seed in 0u64..1_000) {
        let mut r = rng(seed);
        let rows = 6usize;
        let x = rand_tensor(&[rows, 3], &mut r);
        let dst: Vec<usize> = (0..rows).map(|_| r.random_range(0..3usize)).collect();
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            let j = r.random_range(0..=i);
            perm.swap(i, j);
        }
        let px_data: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p*3..p*3+3].to_vec()).collect();
        let px = Tensor::matrix(rows, 3, px_data).unwrap();
        let pdst: Vec<usize> = perm.iter().map(|&p| dst[p]).collect();

        let mut tape = Tape::new();
        let a = tape.input(x);
        let s1 = tape.segment_sum(a, &dst, 3).unwrap();
        let b = tape.input(px);
        let s2 = tape.segment_sum(b, &pdst, 3).unwrap();
        for (u, v) in tape.value(s1).data().iter().zip(tape.value(s2).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
