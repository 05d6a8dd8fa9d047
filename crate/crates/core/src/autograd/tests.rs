use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Projects any tensor output onto a scalar with fixed pseudo-random weights,
/// so every output coordinate contributes to the checked gradient.
fn weighted_sum(t: &mut Tape, y: Var) -> crate::Result<Var> {
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0 + 0.05).collect();
    let w = t.constant(t.shape(y).to_vec(), w)?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn assert_grad_ok<F>(f: F, point: &Tensor)
where
    F: Fn(&mut Tape, Var) -> crate::Result<Var>,
{
    let err = check_gradients(f, point, 1e-5, &[]).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn add_and_relu_examples() {
    let mut t = Tape::new();
    let a = t.vector(vec![1.0, 2.0]);
    let b = t.vector(vec![3.0, 4.0]);
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c), &[4.0, 6.0]);
    let x = t.vector(vec![-1.0, 0.0, 2.0]);
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_row_sums() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![1.0; 6]).unwrap();
    let b = t.constant(vec![3, 1], vec![1.0; 3]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(c), &[2, 1]);
    assert_eq!(t.value(c), &[3.0, 3.0]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let v = t.vector(vec![1.0, 2.0]);
    let err = t.add(a, v).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn backward_square_sum() {
    let mut t = Tape::new();
    let x = t.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let c = t.vector(vec![5.0]);
    let s = t.sum(c);
    assert!(matches!(t.backward(s), Err(Error::DetachedLoss)));
    let x = t.param(vec![2], vec![1.0, 2.0]).unwrap();
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0]).requires_grad(true);
    let mut t = Tape::new();
    let x = t.leaf(&p);
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    let once = t.backward(loss).unwrap();
    once.accumulate_into(x, &mut p).unwrap();
    let first = p.grad().unwrap().to_vec();
    let twice = t.backward(loss).unwrap();
    twice.accumulate_into(x, &mut p).unwrap();
    let doubled: Vec<f64> = first.iter().map(|v| 2.0 * v).collect();
    assert_eq!(p.grad().unwrap(), doubled.as_slice());
    p.zero_grad();
    assert!(p.grad().unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_path_matches_taped_path_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, vec![4, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![3, 4, 2], -1.0, 1.0);
    let run = |trainable: bool| {
        let mut t = Tape::new();
        let xv = t.leaf(&x.clone().requires_grad(trainable));
        let wv = t.leaf(&w.clone().requires_grad(trainable));
        let c = t.conv1d(xv, wv).unwrap();
        let r = t.relu(c);
        let s = t.softmax(r).unwrap();
        let l = t.log(s);
        t.value(l).to_vec()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![3, 5], -1.0, 1.0).requires_grad(true);
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let v = t.variance_axis(xv, 1).unwrap();
        let s = t.sqrt(v);
        let loss = t.sum(s);
        t.backward(loss).unwrap().get(xv).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn broadcast_add_mul_div_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = rand_tensor(&mut rng, vec![1, 4], 0.5, 2.0);
    let x = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    for kind in 0..4 {
        let b = b.clone();
        assert_grad_ok(
            move |t, x| {
                let bv = t.constant_tensor(&b);
                let y = match kind {
                    0 => t.add(x, bv)?,
                    1 => t.sub(bv, x)?,
                    2 => t.mul(x, bv)?,
                    _ => t.div(x, bv)?,
                };
                weighted_sum(t, y)
            },
            &x,
        );
    }
    // gradient with respect to the broadcast operand
    let xc = x.clone();
    assert_grad_ok(
        move |t, b| {
            let xv = t.constant_tensor(&xc);
            let y = t.div(xv, b)?;
            weighted_sum(t, y)
        },
        &b,
    );
}

#[test]
fn matmul_and_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
    let bc = b.clone();
    assert_grad_ok(
        move |t, a| {
            let bv = t.constant_tensor(&bc);
            let y = t.matmul(a, bv)?;
            weighted_sum(t, y)
        },
        &a,
    );
    let ac = a.clone();
    assert_grad_ok(
        move |t, b| {
            let av = t.constant_tensor(&ac);
            let y = t.matmul(av, b)?;
            weighted_sum(t, y)
        },
        &b,
    );

    let x = rand_tensor(&mut rng, vec![2, 7], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![3, 2, 3], -1.0, 1.0);
    let wc = w.clone();
    assert_grad_ok(
        move |t, x| {
            let wv = t.constant_tensor(&wc);
            let y = t.conv1d(x, wv)?;
            weighted_sum(t, y)
        },
        &x,
    );
    let xc = x.clone();
    assert_grad_ok(
        move |t, w| {
            let xv = t.constant_tensor(&xc);
            let y = t.conv1d(xv, w)?;
            weighted_sum(t, y)
        },
        &w,
    );
}

#[test]
fn conv1d_matches_direct_sliding_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, vec![2, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![3, 2, 3], -1.0, 1.0);
    let mut t = Tape::new();
    let xv = t.constant_tensor(&x);
    let wv = t.constant_tensor(&w);
    let y = t.conv1d(xv, wv).unwrap();
    assert_eq!(t.shape(y), &[3, 4]);
    for o in 0..3 {
        for s in 0..4 {
            let mut acc = 0.0;
            for c in 0..2 {
                for j in 0..3 {
                    acc += w.data()[(o * 2 + c) * 3 + j] * x.data()[c * 6 + s + j];
                }
            }
            assert!((t.value(y)[o * 4 + s] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn unary_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos = rand_tensor(&mut rng, vec![5], 0.2, 2.0);
    let any = rand_tensor(&mut rng, vec![5], -2.0, 2.0);
    assert_grad_ok(|t, x| { let y = t.log(x); weighted_sum(t, y) }, &pos);
    assert_grad_ok(|t, x| { let y = t.exp(x); weighted_sum(t, y) }, &any);
    assert_grad_ok(|t, x| { let y = t.pow(x, 3.0); weighted_sum(t, y) }, &any);
    assert_grad_ok(|t, x| { let y = t.pow(x, 0.5); weighted_sum(t, y) }, &pos);
    assert_grad_ok(|t, x| { let y = t.sqrt(x); weighted_sum(t, y) }, &pos);
    assert_grad_ok(|t, x| { let y = t.clamp_min(x, -10.0); weighted_sum(t, y) }, &any);
    assert_grad_ok(|t, x| { let y = t.scale(x, -1.5); weighted_sum(t, y) }, &any);
    let away = Tensor::from_vec(vec![-1.3, 0.4, 2.2, -0.7]);
    assert_grad_ok(|t, x| { let y = t.relu(x); weighted_sum(t, y) }, &away);
}

#[test]
fn reduction_and_shape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    assert_grad_ok(|t, x| { let y = t.mean(x); Ok(t.scale(y, 3.0)) }, &x);
    for axis in 0..2 {
        assert_grad_ok(move |t, x| { let y = t.mean_axis(x, axis)?; weighted_sum(t, y) }, &x);
        assert_grad_ok(move |t, x| { let y = t.sum_axis(x, axis)?; weighted_sum(t, y) }, &x);
        assert_grad_ok(move |t, x| { let y = t.variance_axis(x, axis)?; weighted_sum(t, y) }, &x);
    }
    assert_grad_ok(|t, x| { let y = t.transpose(x)?; weighted_sum(t, y) }, &x);
    assert_grad_ok(|t, x| { let y = t.slice(x, 1, 1, 2)?; weighted_sum(t, y) }, &x);
    assert_grad_ok(
        |t, x| {
            let a = t.slice(x, 0, 0, 1)?;
            let y = t.concat(&[x, a, x], 0)?;
            weighted_sum(t, y)
        },
        &x,
    );
    assert_grad_ok(|t, x| { let y = t.softmax(x)?; weighted_sum(t, y) }, &x);
    let sig = rand_tensor(&mut rng, vec![20], -1.0, 1.0);
    assert_grad_ok(|t, x| { let y = t.frames(x, 6, 4, 0, 4)?; weighted_sum(t, y) }, &sig);
}

#[test]
fn cosine_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, vec![6], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![6], -1.0, 1.0);
    let bc = b.clone();
    assert_grad_ok(
        move |t, a| {
            let bv = t.constant_tensor(&bc);
            t.cosine_similarity(a, bv)
        },
        &a,
    );
    assert_grad_ok(|t, x| t.softmax_cross_entropy(x, 2), &a);
}

#[test]
fn cosine_rejects_zero_vectors() {
    let mut t = Tape::new();
    let a = t.vector(vec![0.0, 0.0]);
    let b = t.vector(vec![1.0, 0.0]);
    assert!(matches!(t.cosine_similarity(a, b), Err(Error::ZeroNorm(_))));
}

#[test]
fn softmax_cross_entropy_single_class_is_zero() {
    let mut t = Tape::new();
    let z = t.vector(vec![3.7]);
    let l = t.softmax_cross_entropy(z, 0).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    assert!(t.softmax_cross_entropy(z, 1).is_err());
}

#[test]
fn sqrt_derivative_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.param(vec![2], vec![0.0, 4.0]).unwrap();
    let y = t.sqrt(x);
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.25]);
}

#[test]
fn grad_support_tracks_concat_pieces() {
    let mut t = Tape::new();
    let w = t.param(vec![2], vec![1.0, 2.0]).unwrap();
    let x = t.vector(vec![0.0; 3]);
    let left = t.slice(w, 0, 0, 1).unwrap();
    let right = t.slice(w, 0, 1, 1).unwrap();
    let cat = t.concat(&[left, x, right], 0).unwrap();
    assert_eq!(
        t.grad_support(cat),
        vec![true, false, false, false, true]
    );
    let d = t.detach(cat);
    assert_eq!(t.grad_support(d), vec![false; 5]);
}
