use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::new();
    let a = tape.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(&t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
    assert_eq!(*a.matmul(&b).unwrap().value(), vec![5.0, 6.0, 7.0, 8.0]);

    let a = tape.constant(&t(vec![1, 2], vec![1.0, 2.0]));
    let b = tape.constant(&t(vec![2, 1], vec![3.0, 4.0]));
    assert_eq!(*a.matmul(&b).unwrap().value(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(vec![2, 3]));
    let b = tape.constant(&Tensor::zeros(vec![2, 3]));
    match a.matmul(&b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_grad_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a0 = rand_tensor(vec![3, 4], &mut rng).with_requires_grad();
    let b0 = rand_tensor(vec![4, 2], &mut rng);
    let tape = Tape::new();
    let a = tape.leaf(&a0);
    let b = tape.constant(&b0);
    let loss = a.matmul(&b).unwrap().sum();
    let grads = tape.backward(loss).unwrap();

    let fd = finite_difference_grad(
        |x| {
            let tape = Tape::new();
            let a = tape.constant(x);
            let b = tape.constant(&b0);
            Ok(a.matmul(&b)?.sum().item())
        },
        &a0,
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(&grads.wrt(a), fd.data(), 1e-8) < 1e-6);
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(&t(vec![1, 2], vec![0.0, 0.0]));
    assert_eq!(*x.softmax_rows().unwrap().value(), vec![0.5, 0.5]);

    let x = tape.constant(&t(vec![1, 3], vec![1000.0, 1000.0, 1000.0]));
    for v in x.softmax_rows().unwrap().value().iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    // direct evaluation: e^i / (e + e^2 + e^3)
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    let expect: Vec<f64> = (1..=3).map(|i| (i as f64).exp() / z).collect();
    let x = tape.constant(&t(vec![1, 3], vec![1.0, 2.0, 3.0]));
    let y = x.softmax_rows().unwrap().value();
    for ((got, want), frozen) in y.iter().zip(&expect).zip([0.09003, 0.24473, 0.66524]) {
        assert!((got - want).abs() < 1e-12);
        assert!((got - frozen).abs() < 1e-5);
    }
}

#[test]
fn softmax_rejects_fully_masked_row() {
    let tape = Tape::new();
    let x = tape.constant(&t(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]));
    let masked = x
        .mask_fill(Arc::new(vec![true, true, false, false]))
        .unwrap();
    assert!(matches!(
        masked.softmax_rows(),
        Err(Error::DegenerateMask { row: 1 })
    ));
}

#[test]
fn cross_entropy_uniform_and_delta() {
    let tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(vec![3, 257]));
    let loss = logits
        .cross_entropy(&[0, 100, 256], &[true, true, true])
        .unwrap();
    assert!((loss.item() - 257f64.ln()).abs() < 1e-12);
    assert!((loss.item() - 5.549).abs() < 1e-3);

    let mut d = vec![0.0; 10];
    d[4] = 30.0;
    let logits = tape.constant(&t(vec![1, 10], d));
    assert!(logits.cross_entropy(&[4], &[true]).unwrap().item() < 1e-10);
}

#[test]
fn cross_entropy_matches_per_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(vec![4, 8], &mut rng);
    let targets = [3usize, 0, 7, 5];
    let mask = [true, false, true, true];
    let tape = Tape::new();
    let loss = tape
        .constant(&x)
        .cross_entropy(&targets, &mask)
        .unwrap()
        .item();

    let mut total = 0.0;
    let mut n = 0.0;
    for r in 0..4 {
        if !mask[r] {
            continue;
        }
        let row = x.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[targets[r]].exp() / z).ln();
        n += 1.0;
    }
    assert!((loss - total / n).abs() < 1e-10);
}

#[test]
fn cross_entropy_empty_mask_is_an_error() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![2, 3]));
    assert!(matches!(
        x.cross_entropy(&[0, 1], &[false, false]),
        Err(Error::EmptyLoss)
    ));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]).with_requires_grad());
    let off = tape.leaf(&t(vec![3], vec![9.0, 9.0, 9.0]).with_requires_grad());
    let loss = x.mul(&x).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x), vec![2.0, 4.0, 6.0]);
    assert_eq!(grads.wrt(off), vec![0.0, 0.0, 0.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2]).with_requires_grad());
    assert!(matches!(tape.backward(x), Err(Error::Rank(_))));
}

#[test]
fn grads_accumulate_across_backward_calls() {
    let mut p = t(vec![2], vec![1.0, -1.0]).with_requires_grad();
    for _ in 0..2 {
        let tape = Tape::new();
        let x = tape.leaf(&p);
        let grads = tape.backward(x.mul(&x).unwrap().sum()).unwrap();
        p.accumulate_grad(&grads.wrt(x)).unwrap();
    }
    assert_eq!(p.grad().unwrap(), &[4.0, -4.0]);
}

#[test]
fn tape_records_are_topologically_ordered() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::full(vec![2, 2], 0.5).with_requires_grad());
    let y = x.matmul(&x).unwrap().silu().softmax_rows().unwrap();
    let _ = y.sum();
    for id in 0..tape.len() {
        let (_, inputs) = tape.record(id);
        assert!(inputs.iter().all(|&i| i < id));
    }
}

#[test]
fn two_layer_network_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = rand_tensor(vec![5, 4], &mut rng);
    let w1 = rand_tensor(vec![4, 6], &mut rng).with_requires_grad();
    let w2 = rand_tensor(vec![6, 3], &mut rng);
    let targets = [0usize, 2, 1, 1, 0];
    let net = |w1: &Tensor| -> crate::Result<f64> {
        let tape = Tape::new();
        let h = tape.constant(&x0).matmul(&tape.constant(w1))?.silu();
        let logits = h.matmul(&tape.constant(&w2))?;
        Ok(logits.cross_entropy(&targets, &[true; 5])?.item())
    };
    let tape = Tape::new();
    let w = tape.leaf(&w1);
    let h = tape.constant(&x0).matmul(&w).unwrap().silu();
    let loss = h
        .matmul(&tape.constant(&w2))
        .unwrap()
        .cross_entropy(&targets, &[true; 5])
        .unwrap();
    let analytic = tape.backward(loss).unwrap().wrt(w);
    let fd = finite_difference_grad(net, &w1, 1e-5).unwrap();
    assert!(max_relative_error(&analytic, fd.data(), 1e-6) < 1e-4);
}

#[test]
fn backward_is_linear_over_independent_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = rand_tensor(vec![3, 3], &mut rng).with_requires_grad();
    let a = rand_tensor(vec![2, 3], &mut rng);
    let b = rand_tensor(vec![4, 3], &mut rng);
    fn graph<'t>(tape: &'t Tape, w: Var<'t>, x: &Tensor) -> Var<'t> {
        let y = tape.constant(x).matmul(&w).unwrap();
        y.mul(&y).unwrap().sum()
    }
    let separate: Vec<f64> = {
        let tape = Tape::new();
        let w = tape.leaf(&p);
        let ga = tape.backward(graph(&tape, w, &a)).unwrap().wrt(w);
        let tape = Tape::new();
        let w = tape.leaf(&p);
        let gb = tape.backward(graph(&tape, w, &b)).unwrap().wrt(w);
        ga.iter().zip(&gb).map(|(x, y)| x + y).collect()
    };
    let tape = Tape::new();
    let w = tape.leaf(&p);
    let total = graph(&tape, w, &a).add(&graph(&tape, w, &b)).unwrap();
    let joint = tape.backward(total).unwrap().wrt(w);
    assert!(max_relative_error(&joint, &separate, 1e-12) < 1e-12);
}

/// Checks every differentiable primitive against central differences by
/// contracting its output with fixed random weights.
fn check_op<F>(inputs: &[Tensor], weights_seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>,
{
    let loss_of = |vals: &[Tensor]| -> crate::Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|v| tape.constant(v)).collect();
        let out = f(&tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = rand_tensor(out.shape(), &mut rng);
        Ok(out.mul(&tape.constant(&w))?.sum().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|v| tape.leaf(&v.clone().with_requires_grad()))
        .collect();
    let out = f(&tape, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = rand_tensor(out.shape(), &mut rng);
    let grads = tape
        .backward(out.mul(&tape.constant(&w)).unwrap().sum())
        .unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let fd = finite_difference_grad(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = x.clone();
                loss_of(&vals)
            },
            input,
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&grads.wrt(vars[k]), fd.data(), 1e-6));
    }
    worst
}

fn arb_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    rand_tensor(vec![rows, cols], &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_finite_differences(
        m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>(), which in 0usize..15,
    ) {
        let a = arb_matrix(m, k, seed);
        let b = arb_matrix(k, n, seed ^ 1);
        let same = arb_matrix(m, k, seed ^ 2);
        let row = arb_matrix(1, k, seed ^ 3);
        let err = match which {
            0 => check_op(&[a, b], seed, |_, v| v[0].matmul(&v[1])),
            1 => check_op(&[a, same], seed, |_, v| v[0].matmul_nt(&v[1])),
            2 => check_op(&[a, same], seed, |_, v| v[0].add(&v[1])),
            3 => check_op(&[a, same], seed, |_, v| v[0].mul(&v[1])),
            4 => check_op(&[a, row], seed, |_, v| v[0].add_row(&v[1])),
            5 => check_op(&[a], seed, |_, v| v[0].softmax_rows()),
            6 => check_op(&[a, row], seed, |_, v| v[0].rms_norm(&v[1])),
            7 => check_op(&[a], seed, |_, v| Ok(v[0].silu())),
            8 => check_op(&[a], seed, |_, v| Ok(v[0].mean_rows())),
            9 => check_op(&[a, same], seed, |tape, v| tape.concat_rows(&[v[0], v[1]])),
            10 => check_op(&[a, same], seed, |tape, v| tape.concat_cols(&[v[1], v[0]])),
            11 => check_op(&[a], seed, |_, v| v[0].slice_cols(0, (k + 1) / 2)?.slice_rows(m / 2, m)),
            12 => check_op(&[a], seed, |_, v| v[0].gather_rows(&[m - 1, 0, m - 1])),
            13 => check_op(&[a], seed, |_, v| {
                let targets: Vec<usize> = (0..m).map(|i| (i * 7 + 1) % k).collect();
                let mut mask = vec![true; m];
                mask[0] = m == 1;
                v[0].cross_entropy(&targets, &mask)
            }),
            _ => {
                let wide = arb_matrix(m, 4, seed);
                let positions: Vec<usize> = (0..m).map(|i| i * 3 + 1).collect();
                let rot = Arc::new(Rotation::new(&positions, 2, 10.0).unwrap());
                check_op(&[wide], seed, move |_, v| v[0].rope(&rot))
            }
        };
        prop_assert!(err < 1e-4, "primitive {which} rel err {err}");
    }

    #[test]
    fn embedding_scatter_and_mask_gradients(rows in 1usize..6, seed in any::<u64>()) {
        let table = arb_matrix(5, 3, seed);
        let ids: Vec<usize> = (0..rows).map(|i| (i * 3 + seed as usize) % 5).collect();
        let err = check_op(&[table], seed, |_, v| v[0].embedding(&ids));
        prop_assert!(err < 1e-4);

        let a = arb_matrix(rows, 3, seed ^ 9);
        let b = arb_matrix(1, 3, seed ^ 10);
        let idx_a: Vec<usize> = (0..rows).map(|i| if i == 0 { rows } else { i - 1 }).collect();
        let err = check_op(&[a, b], seed, |tape, v| {
            tape.scatter_rows(&[(v[0], idx_a.clone()), (v[1], vec![rows - 1])])
        });
        prop_assert!(err < 1e-4);

        let x = arb_matrix(rows, 4, seed ^ 11);
        let allow: Vec<bool> = (0..rows * 4).map(|i| i % 4 <= i / 4 % 4).collect();
        let allow = Arc::new(allow);
        let err = check_op(&[x], seed, |_, v| v[0].mask_fill(allow.clone())?.softmax_rows());
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        m in 1usize..5, n in 1usize..8, seed in any::<u64>(), shift in -50.0f64..50.0,
    ) {
        let x = arb_matrix(m, n, seed);
        let shifted = Tensor::new(vec![m, n], x.data().iter().map(|v| v * 10.0 + shift).collect()).unwrap();
        let base = Tensor::new(vec![m, n], x.data().iter().map(|v| v * 10.0).collect()).unwrap();
        let tape = Tape::new();
        let y = tape.constant(&base).softmax_rows().unwrap().value();
        let ys = tape.constant(&shifted).softmax_rows().unwrap().value();
        for r in 0..m {
            let s: f64 = y[r * n..(r + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y[r * n..(r + 1) * n].iter().all(|v| *v >= 0.0));
        }
        for (a, b) in y.iter().zip(ys.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
