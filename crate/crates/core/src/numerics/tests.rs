use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Result;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    t
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Runs `f` on five seeded input sets and checks every input's gradient.
fn gradcheck_seeds<F>(shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let errors = check_gradients(&f, &inputs, EPS).unwrap();
        for (i, e) in errors.iter().enumerate() {
            assert!(*e < TOL, "seed {seed} input {i}: relative error {e}");
        }
    }
}

/// Weights an output with a fixed random pattern before summing, so the
/// composition is sensitive to every output entry.
fn weighted_sum<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let w = random(&v.shape(), &mut rng);
    Ok(v.mul_const(w)?.sum())
}

#[test]
fn matmul_gradients() {
    gradcheck_seeds(&[&[3, 4], &[4, 2]], |_, x| x[0].matmul(x[1]).map(|v| v.sum()));
    gradcheck_seeds(&[&[3, 4], &[4, 2]], |_, x| weighted_sum(x[0].matmul(x[1])?, 1));
}

#[test]
fn softmax_gradients() {
    gradcheck_seeds(&[&[3, 5]], |_, x| weighted_sum(x[0].softmax_rows(), 2));
}

#[test]
fn layer_norm_gradients() {
    gradcheck_seeds(&[&[4, 6], &[6], &[6]], |_, x| {
        weighted_sum(x[0].layer_norm(x[1], x[2])?, 3)
    });
}

#[test]
fn elementwise_gradients() {
    gradcheck_seeds(&[&[3, 3], &[3, 3]], |_, x| {
        let y = x[0].add(x[1])?.elu().mul(x[1])?.sub(x[0])?.scale(0.7);
        weighted_sum(y, 4)
    });
    gradcheck_seeds(&[&[3, 4], &[4]], |_, x| weighted_sum(x[0].add_row(x[1])?.elu(), 5));
}

#[test]
fn mse_and_reductions() {
    gradcheck_seeds(&[&[3, 4], &[3, 4]], |_, x| x[0].mse(x[1]));
    gradcheck_seeds(&[&[3, 4]], |_, x| Ok(x[0].elu().mean()));
}

#[test]
fn structural_ops() {
    gradcheck_seeds(&[&[2, 3], &[2, 2]], |_, x| {
        weighted_sum(x[0].concat_cols(x[1])?.transpose(), 6)
    });
    gradcheck_seeds(&[&[2, 3], &[4, 3]], |_, x| weighted_sum(x[0].concat_rows(x[1])?, 7));
    gradcheck_seeds(&[&[4, 3]], |_, x| weighted_sum(x[0].gather_rows(&[3, 0, 3, 1])?, 8));
    gradcheck_seeds(&[&[3, 3]], |_, x| {
        weighted_sum(x[0].select(&[(0, 1), (2, 2), (0, 1)])?, 9)
    });
}

#[test]
fn normalisation_and_contrastive_ops() {
    gradcheck_seeds(&[&[4, 3]], |_, x| weighted_sum(x[0].l2_normalize_rows(), 10));
    gradcheck_seeds(&[&[4, 4]], |_, x| weighted_sum(x[0].log_softmax_off_diag()?, 11));
}

#[test]
fn sparse_product_gradients() {
    let m = std::rc::Rc::new(
        CsrMatrix::from_rows(4, &[vec![(0, 0.5), (3, 0.5)], vec![(1, 1.0)], vec![(2, 0.2), (0, 0.8)]])
            .unwrap(),
    );
    let dense = m.to_dense();
    let x = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(m.matmul(&x).unwrap(), dense.matmul(&x).unwrap());
    gradcheck_seeds(&[&[4, 3]], move |_, x| weighted_sum(x[0].sparse_lmul(m.clone())?, 14));
}

#[test]
fn dropout_gradient_uses_fixed_mask() {
    gradcheck_seeds(&[&[5, 4]], |_, x| weighted_sum(x[0].dropout(0.3, 77, true)?, 12));
}

#[test]
fn neighbor_attention_gradients() {
    let nb = std::rc::Rc::new(vec![0, 1, 2, 1, 0, 3, 2, 3, 0]);
    gradcheck_seeds(&[&[3, 2], &[4, 2], &[4, 3]], move |_, x| {
        let out = x[0].neighbor_attention(x[1], x[2], nb.clone(), 3, 0.8)?;
        weighted_sum(out, 13)
    });
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let run = |rows: &[&[f64]]| {
        let t = Tensor::from_rows(rows).unwrap();
        tape.constant(t).softmax_rows().value().data().to_vec()
    };
    assert_eq!(run(&[&[0.0, 0.0]]), vec![0.5, 0.5]);
    assert_close(&run(&[&[1000.0, 1000.0, 1000.0]]), &[1.0 / 3.0; 3], 1e-15);
    // e⁰ / (e⁰ + e^{ln 3}) = 1/4
    assert_close(&run(&[&[0.0, 3f64.ln()]]), &[0.25, 0.75], 1e-12);
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let gain = tape.constant(Tensor::filled(&[2], 1.0));
    let bias = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::from_rows(&[[1.0, 3.0], [5.0, 5.0]]).unwrap());
    let y = x.layer_norm(gain, bias).unwrap().value();
    assert_close(y.row(0), &[-1.0, 1.0], 1e-3);
    assert_eq!(y.row(1), &[0.0, 0.0]);
}

#[test]
fn dropout_modes() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[100, 100], 1.0));
    assert_eq!(*x.dropout(0.0, 1, true).unwrap().value(), *x.value());
    assert_eq!(*x.dropout(0.2, 1, false).unwrap().value(), *x.value());
    let y = x.dropout(0.5, 42, true).unwrap().value();
    let mean = y.sum() / y.numel() as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    let mask = dropout_mask(&[100, 100], 0.5, 42).unwrap();
    assert_eq!(*y, mask);
    assert!(x.dropout(1.0, 1, true).is_err());
    assert!(x.dropout(1.0, 1, false).is_err());
}

#[test]
fn elu_and_mse_values() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[[0.0, 1.0, -1.0]]).unwrap());
    let y = x.elu().value();
    assert_eq!(&y.data()[..2], &[0.0, 1.0]);
    assert!((y.data()[2] - ((-1f64).exp() - 1.0)).abs() < 1e-15);
    assert_eq!(x.mse(x).unwrap().value().item(), 0.0);
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        x.mse(z),
        Err(crate::SencaError::Shape { op: "mse", .. })
    ));
}

#[test]
fn backward_requires_scalar_and_zero_fills_unused() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::filled(&[2, 2], 1.0));
    let unused = tape.leaf(Tensor::filled(&[3], 1.0));
    assert!(tape.backward(a).is_err());
    let loss = a.sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    assert_eq!(grads.wrt(a), Tensor::filled(&[2, 2], 1.0));
}

#[test]
fn matmul_gradient_contract() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap());
    let b = tape.leaf(Tensor::from_rows(&[[3.0, 0.0, 1.0], [-2.0, 1.0, 4.0]]).unwrap());
    let loss = a.matmul(b).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let ones = Tensor::filled(&[2, 3], 1.0);
    assert_eq!(grads.wrt(a), ones.matmul(&b.value().transpose()).unwrap());
    assert_eq!(grads.wrt(b), a.value().transpose().matmul(&ones).unwrap());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
        proptest::collection::vec(-1e4f64..1e4, 6), 1..5)) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::from_rows(&rows).unwrap()).softmax_rows().value();
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.row(r).iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        }
    }

    #[test]
    fn forward_ops_stay_finite(vals in proptest::collection::vec(-50f64..50.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, vals).unwrap());
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let sq = x.matmul(x.transpose()).unwrap();
        let outs = [
            x.elu().value(),
            x.softmax_rows().value(),
            x.layer_norm(g, b).unwrap().value(),
            x.l2_normalize_rows().value(),
            sq.log_softmax_off_diag().unwrap().value(),
        ];
        for o in outs {
            prop_assert!(o.is_finite());
        }
    }

    #[test]
    fn dropout_is_input_times_scaled_mask(seed in 0u64..1000, p in 0.0f64..0.9) {
        let tape = Tape::new();
        let input = Tensor::matrix(4, 5, (0..20).map(|v| v as f64 - 7.5).collect()).unwrap();
        let x = tape.constant(input.clone());
        let y = x.dropout(p, seed, true).unwrap().value();
        let mask = dropout_mask(&[4, 5], p, seed).unwrap();
        for ((o, i), m) in y.data().iter().zip(input.data()).zip(mask.data()) {
            prop_assert_eq!(*o, i * m);
        }
    }
}
