mod common;

use common::{gaussian, rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spot_core::gradcheck::check;
use spot_core::rng::DropoutKey;
use spot_core::tensor::{Result, Tape, Tensor, TensorError, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn t(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_matrix(&gaussian(r, rows, cols))
}

/// Reduces a matrix output to a scalar with fixed random weights so that
/// every output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let (rows, cols) = (tape.value(out).rows(), tape.value(out).cols());
    let w = tape.constant(t(&mut r, rows, cols));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn assert_grad<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let rep = check::<TensorError, _>(inputs, f, H, 1).unwrap();
    assert!(rep.max_rel_error() < TOL, "{name}: {rep:?}");
}

#[test]
fn forward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
    let s = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.25; 4]);

    let x = tape.leaf(Tensor::matrix(1, 3, vec![2.0; 3]).unwrap());
    let g = tape.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
    let b = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let ln = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(ln).data().iter().all(|v| v.abs() < 1e-12));

    let mut r = rng(1);
    let x = tape.leaf(t(&mut r, 5, 7));
    let s = tape.softmax_lastdim(x).unwrap();
    for i in 0..5 {
        assert!((tape.value(s).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut m = t(&mut r, 3, 4);
    m.data_mut()[4..8].fill(0.0);
    let x = tape.leaf(m);
    let n = tape.l2_normalize_lastdim(x).unwrap();
    for i in [0, 2] {
        let norm = tape.value(n).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    assert_eq!(tape.value(n).row(1), &[0.0; 4]);

    let d = tape.dropout(x, 0.5, DropoutKey::new(1, 2, 3), false).unwrap();
    assert_eq!(d, x);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(vec![5], vec![1.0, -2.0, 3.0, 0.5, 0.0])
            .unwrap()
            .with_grad(),
    );
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);
    assert_eq!(tape.backward(s), Err(TensorError::BackwardTwice));
    tape.reset();
    tape.backward(s).unwrap();

    let mut tape = Tape::new();
    let data = vec![1.5, -2.0, 0.25];
    let x = tape.leaf(Tensor::new(vec![3], data.clone()).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &data[..]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let mut other = Tape::new();
    let v = other.leaf(Tensor::scalar(1.0));
    assert_eq!(Tape::new().backward(v), Err(TensorError::EmptyTape));
}

#[test]
fn shape_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    let c = tape.leaf(Tensor::zeros(vec![3, 2]));
    assert!(tape.add(a, c).is_err());
    assert!(tape.dropout(a, 1.0, DropoutKey::new(0, 0, 0), true).is_err());
    let big = tape.leaf(Tensor::new(vec![1], vec![1e300]).unwrap());
    assert!(matches!(tape.mul(big, big), Err(TensorError::NonFinite { .. })));
}

#[test]
fn linear_algebra_gradients() {
    let mut r = rng(2);
    assert_grad("matmul", &[t(&mut r, 3, 4), t(&mut r, 4, 2)], |tp, x| {
        let y = tp.matmul(x[0], x[1])?;
        weighted_sum(tp, y, 1)
    });
    assert_grad("transpose", &[t(&mut r, 3, 4)], |tp, x| {
        let y = tp.transpose(x[0])?;
        weighted_sum(tp, y, 2)
    });
    assert_grad("add/mul", &[t(&mut r, 2, 3), t(&mut r, 2, 3)], |tp, x| {
        let a = tp.add(x[0], x[1])?;
        let m = tp.mul(a, x[0])?;
        weighted_sum(tp, m, 3)
    });
    assert_grad("scale/scale_by", &[t(&mut r, 2, 3), Tensor::scalar(0.7)], |tp, x| {
        let a = tp.scale(x[0], -1.3)?;
        let b = tp.scale_by(a, x[1])?;
        weighted_sum(tp, b, 4)
    });
    assert_grad(
        "linear",
        &[t(&mut r, 3, 4), t(&mut r, 4, 5), t(&mut r, 1, 5)],
        |tp, x| {
            let y = tp.linear(x[0], x[1], x[2])?;
            weighted_sum(tp, y, 5)
        },
    );
}

#[test]
fn indexing_gradients() {
    let mut r = rng(3);
    assert_grad("concat_rows", &[t(&mut r, 2, 3), t(&mut r, 1, 3)], |tp, x| {
        let y = tp.concat_rows(&[x[0], x[1], x[0]])?;
        weighted_sum(tp, y, 6)
    });
    assert_grad("concat_cols", &[t(&mut r, 2, 3), t(&mut r, 2, 1)], |tp, x| {
        let y = tp.concat_cols(&[x[1], x[0]])?;
        weighted_sum(tp, y, 7)
    });
    assert_grad("slice_cols", &[t(&mut r, 3, 5)], |tp, x| {
        let y = tp.slice_cols(x[0], 1, 4)?;
        weighted_sum(tp, y, 8)
    });
    assert_grad("gather_rows", &[t(&mut r, 4, 3)], |tp, x| {
        let y = tp.gather_rows(x[0], &[2, 0, 2, 3])?;
        weighted_sum(tp, y, 9)
    });
    assert_grad("gather_cols", &[t(&mut r, 3, 4)], |tp, x| {
        let y = tp.gather_cols(x[0], &[1, 1, 3])?;
        weighted_sum(tp, y, 10)
    });
}

#[test]
fn nonlinearity_gradients() {
    let mut r = rng(4);
    let bounded = |r: &mut ChaCha8Rng, rows, cols| {
        let d = (0..rows * cols).map(|_| r.random_range(-5.0..5.0)).collect();
        Tensor::matrix(rows, cols, d).unwrap()
    };
    assert_grad("softmax", &[bounded(&mut r, 3, 5)], |tp, x| {
        let y = tp.softmax_lastdim(x[0])?;
        weighted_sum(tp, y, 11)
    });
    let allowed = vec![true, false, true, true, false, false, true, true, true, false];
    assert_grad("masked_softmax", &[bounded(&mut r, 2, 5)], |tp, x| {
        let y = tp.masked_softmax_lastdim(x[0], &allowed)?;
        weighted_sum(tp, y, 12)
    });
    assert_grad(
        "layer_norm",
        &[t(&mut r, 3, 6), t(&mut r, 1, 6), t(&mut r, 1, 6)],
        |tp, x| {
            let g = tp.slice_cols(x[1], 0, 6)?;
            let b = tp.slice_cols(x[2], 0, 6)?;
            let y = tp.layer_norm(x[0], g, b)?;
            weighted_sum(tp, y, 13)
        },
    );
    // keep inputs away from the kink at 0
    let away: Vec<f64> = (0..12)
        .map(|i| {
            if i % 2 == 0 {
                0.3 + i as f64 * 0.1
            } else {
                -0.2 - i as f64 * 0.1
            }
        })
        .collect();
    assert_grad("relu", &[Tensor::matrix(3, 4, away).unwrap()], |tp, x| {
        let y = tp.relu(x[0])?;
        weighted_sum(tp, y, 14)
    });
    let key = DropoutKey::new(9, 4, 2);
    assert_grad("dropout", &[t(&mut r, 4, 4)], |tp, x| {
        let y = tp.dropout(x[0], 0.3, key, true)?;
        weighted_sum(tp, y, 15)
    });
    assert_grad("l2_normalize", &[t(&mut r, 3, 4)], |tp, x| {
        let y = tp.l2_normalize_lastdim(x[0])?;
        weighted_sum(tp, y, 16)
    });

    // the zero row is a singular point; its gradient is defined as zero
    let mut z = t(&mut r, 3, 4);
    z.data_mut()[4..8].fill(0.0);
    let mut tape = Tape::new();
    let x = tape.leaf(z.with_grad());
    let y = tape.l2_normalize_lastdim(x).unwrap();
    let l = weighted_sum(&mut tape, y, 16).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(&tape.grad(x).unwrap()[4..8], &[0.0; 4]);
}

#[test]
fn attention_and_loss_gradients() {
    let mut r = rng(5);
    let support = vec![vec![0, 2, 5], vec![1], vec![0, 1, 2, 3, 4, 5]];
    assert_grad("sparse_attention", &[t(&mut r, 3, 6), t(&mut r, 6, 4)], |tp, x| {
        let y = tp.sparse_attention(x[0], x[1], support.clone(), 0.7)?;
        weighted_sum(tp, y, 17)
    });
    assert_grad("cross_entropy", &[t(&mut r, 4, 3)], |tp, x| {
        tp.cross_entropy(x[0], &[0, 2, 1, 0], &[1.0, 0.1, 2.0, 0.5])
    });
    let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    assert_grad("bce", &[t(&mut r, 2, 6)], |tp, x| tp.bce_with_logits(x[0], &targets));
    assert_grad("dice", &[t(&mut r, 2, 6)], |tp, x| tp.dice(x[0], &targets));
}

#[test]
fn three_layer_composition_gradient() {
    let mut r = rng(6);
    let inputs = [
        t(&mut r, 4, 5),
        t(&mut r, 5, 6),
        t(&mut r, 1, 6),
        t(&mut r, 6, 6),
        t(&mut r, 1, 6),
        t(&mut r, 6, 3),
        t(&mut r, 1, 3),
        Tensor::new(vec![6], vec![1.0; 6]).unwrap(),
        Tensor::new(vec![6], vec![0.0; 6]).unwrap(),
    ];
    let rep = check::<TensorError, _>(
        &inputs,
        |tp, x| {
            let h = tp.linear(x[0], x[1], x[2])?;
            let h = tp.layer_norm(h, x[7], x[8])?;
            let h = tp.linear(h, x[3], x[4])?;
            let h = tp.softmax_lastdim(h)?;
            let y = tp.linear(h, x[5], x[6])?;
            tp.cross_entropy(y, &[0, 1, 2, 1], &[1.0; 4])
        },
        H,
        1,
    )
    .unwrap();
    assert!(rep.max_rel_error() < TOL, "{rep:?}");
}

#[test]
fn reused_inputs_accumulate() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap().with_grad());
    let a = tape.add(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let s = tape.sum(b).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
}
