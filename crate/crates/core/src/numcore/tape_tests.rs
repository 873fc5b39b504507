use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Central-difference gradient of `f` with respect to every entry of `inputs[which]`.
fn finite_diff(inputs: &[Tensor], which: usize, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let up = f(&work);
            work[which].data_mut()[i] = orig - h;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    // below this both sides are roundoff (saturated softmax, far ReLU tails)
    if diff < 1e-8 {
        0.0
    } else {
        diff / scale
    }
}

/// Records `build` on a tape with every input as a grad-requiring leaf and
/// compares reverse-mode gradients to finite differences.
fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Tape<'_>, &[Var]) -> Var) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().cloned().map(|x| x.with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|x| tape.leaf(x)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let f = |xs: &[Tensor]| {
        let mut tp = Tape::no_grad();
        let vs: Vec<Var> = xs.iter().map(|x| tp.leaf(x)).collect();
        let o = build(&mut tp, &vs);
        tp.scalar_value(o)
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let fd = finite_diff(inputs, i, &f);
        let an = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; fd.len()]);
        worst = worst.max(rel_err(&an, &fd));
    }
    worst
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let v = tape.constant(t(&[3, 1], &[4., 5., 6.]));
    let out = tape.matmul(eye, v).unwrap();
    assert_eq!(tape.value(out), &[4., 5., 6.]);

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let out = tape.matmul(a, i2).unwrap();
    assert_eq!(tape.value(out), &[1., 2., 3., 4.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let w = random(&mut rng, &[3, 2], 1.0);
    let err = check_grads(&[a, b, w], &|tp, v| {
        let p = tp.matmul(v[0], v[1]).unwrap();
        let q = tp.mul(p, v[2]).unwrap();
        tp.sum(q)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn transposed_and_batched_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&mut rng, &[4, 3], 1.0);
    let b = random(&mut rng, &[2, 4], 1.0);
    let err = check_grads(&[a, b], &|tp, v| {
        let p = tp.matmul_t(v[0], true, v[1], true).unwrap(); // 3x2
        let q = tp.mul(p, p).unwrap();
        tp.sum(q)
    });
    assert!(err < 1e-6, "rel err {err}");

    let a = random(&mut rng, &[2, 3, 4], 1.0);
    let b = random(&mut rng, &[2, 5, 4], 1.0);
    let c = random(&mut rng, &[2, 4, 5], 1.0);
    let err = check_grads(&[a, b, c], &|tp, v| {
        let s = tp.batch_matmul(v[0], v[1], true).unwrap(); // 2x3x5
        let s = tp.softmax_rows(s);
        let o = tp.batch_matmul(s, v[2], true).unwrap(); // 2x3x4
        let o = tp.mul(o, o).unwrap();
        tp.sum(o)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn relu_and_abs_subgradients() {
    let x = t(&[3], &[-1.0, 0.0, 2.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let r = tape.relu(v);
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    let a = tape.abs(v);
    let s = tape.sum(a);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[-1.0, 0.0, 1.0]);

    let s = tape.sum(r);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn exp_log_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[100], (0..100).map(|_| rng.random_range(0.01..50.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let l = tape.log(v).unwrap();
    let e = tape.exp(l);
    for (a, b) in tape.value(e).iter().zip(x.data()) {
        assert!(((a - b) / b).abs() < 1e-12);
    }
}

#[test]
fn numeric_errors() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[2], &[1.0, 0.0]));
    let o = tape.constant(t(&[2], &[1.0, 1.0]));
    assert!(matches!(tape.div(o, z), Err(Error::Numeric(_))));
    assert!(matches!(tape.log(z), Err(Error::Numeric(_))));
    let n = tape.constant(t(&[1], &[-1.0]));
    assert!(matches!(tape.log(n), Err(Error::Numeric(_))));
    assert!(matches!(tape.sqrt(n), Err(Error::Numeric(_))));
}

#[test]
fn reductions_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax_rows(z);
    for v in tape.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
    let s = tape.softmax_rows(big);
    assert_eq!(tape.value(s), &[0.5, 0.5]);
    let l = tape.logsumexp_rows(big);
    assert!((tape.value(l)[0] - (1000.0 + 2f64.ln())).abs() < 1e-12);
    let v = tape.constant(t(&[2], &[3.0, 4.0]));
    let n = tape.l2_norm(v);
    assert_eq!(tape.scalar_value(n), 5.0);

    let m = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let a0 = tape.sum_axis(m, 0).unwrap();
    assert_eq!(tape.value(a0), &[5., 7., 9.]);
    let a1 = tape.mean_axis(m, 1).unwrap();
    assert_eq!(tape.value(a1), &[2., 5.]);
    assert!(tape.sum_axis(m, 2).is_err());
}

#[test]
fn zero_vector_norm_has_zero_gradient() {
    let x = Tensor::zeros(&[2, 3]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let n = tape.l2_norm(v);
    let r = tape.normalize_rows(v);
    let s = tape.sum(r);
    let total = tape.add(n, s).unwrap();
    let g = tape.backward(total).unwrap();
    assert!(g.get(v).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn backward_examples_and_accumulation() {
    let mut w = t(&[4], &[1.0, -2.0, 3.0, 0.5]).with_requires_grad(true);
    let frozen = t(&[4], &[1.0; 4]);
    {
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let f = tape.leaf(&frozen);
        let p = tape.mul(v, f).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0; 4]);
        assert!(g.get(f).is_none());
    }
    let grads = {
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let n = tape.l2_norm(v);
        let sq = tape.mul(n, n).unwrap();
        let g = tape.backward(sq).unwrap();
        g.get(v).unwrap().to_vec()
    };
    let want: Vec<f64> = w.data().iter().map(|x| 2.0 * x).collect();
    for (a, b) in grads.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    w.accumulate_grad(&grads);
    w.accumulate_grad(&grads);
    for (a, b) in w.grad().unwrap().iter().zip(&want) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let x = Tensor::zeros(&[3]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn fused_layers_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[6, 5], 2.0);
    let gain = random(&mut rng, &[5], 1.5);
    let bias = random(&mut rng, &[5], 1.0);
    let w = random(&mut rng, &[6, 5], 1.0);
    let err = check_grads(&[x, gain, bias, w], &|tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        let y = tp.gelu(y);
        let y = tp.mul(y, v[3]).unwrap();
        tp.sum(y)
    });
    assert!(err < 1e-6, "layer_norm/gelu rel err {err}");

    // heads layout round trip through attention-style products
    let qkv = random(&mut rng, &[2 * 3, 3 * 4], 1.0);
    let cls = random(&mut rng, &[4], 1.0);
    let err = check_grads(&[qkv, cls], &|tp, v| {
        let q = tp.split_heads(v[0], 2, 3, 2, 0, 3).unwrap();
        let k = tp.split_heads(v[0], 2, 3, 2, 1, 3).unwrap();
        let val = tp.split_heads(v[0], 2, 3, 2, 2, 3).unwrap();
        let s = tp.batch_matmul(q, k, true).unwrap();
        let a = tp.softmax_rows(s);
        let o = tp.batch_matmul(a, val, false).unwrap();
        let m = tp.merge_heads(o, 2, 2).unwrap();
        let m = tp.prepend_row(m, v[1], 2).unwrap();
        let sel = tp.select_rows(m, &[0, 4, 5]).unwrap();
        let sel = tp.normalize_rows(sel);
        let sq = tp.mul(sel, sel).unwrap();
        let lsm = tp.log_softmax_rows(m);
        let l1 = tp.sum(lsm);
        let l2 = tp.sum_axis(sq, 1).unwrap();
        let l2 = tp.logsumexp_rows(l2);
        let l2 = tp.sum(l2);
        tp.add(l1, l2).unwrap()
    });
    assert!(err < 1e-6, "layout ops rel err {err}");
}

#[test]
fn split_then_merge_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2 * 5, 8], 1.0);
    let mut tape = Tape::no_grad();
    let v = tape.leaf(&x);
    let h = tape.split_heads(v, 2, 5, 4, 0, 1).unwrap();
    let m = tape.merge_heads(h, 2, 4).unwrap();
    assert_eq!(tape.value(m), x.data());
}

/// Random expression over the full primitive set.
fn random_program(tp: &mut Tape<'_>, v: &[Var], ops: &[u8]) -> Var {
    // v[0], v[1]: 3x4; v[2]: 4x3; v[3]: [4]
    let mut cur = v[0];
    for &op in ops {
        cur = match op % 12 {
            0 => tp.add(cur, v[1]).unwrap(),
            1 => tp.sub(cur, v[1]).unwrap(),
            2 => tp.mul(cur, v[1]).unwrap(),
            3 => {
                let d = tp.abs(v[1]);
                let d = tp.add_scalar(d, 1.0);
                tp.div(cur, d).unwrap()
            }
            4 => {
                let s = tp.scale(cur, 0.1);
                tp.exp(s)
            }
            5 => {
                let sq = tp.mul(cur, cur).unwrap();
                let sq = tp.add_scalar(sq, 1.0);
                tp.log(sq).unwrap()
            }
            6 => tp.relu(cur),
            7 => {
                let sq = tp.mul(cur, cur).unwrap();
                let sq = tp.add_scalar(sq, 0.5);
                tp.sqrt(sq).unwrap()
            }
            8 => tp.abs(cur),
            9 => {
                let m = tp.matmul(cur, v[2]).unwrap();
                let m = tp.scale(m, 0.2);
                tp.matmul_t(m, false, v[2], true).unwrap()
            }
            10 => tp.softmax_rows(cur),
            _ => tp.add_tiled(cur, v[3]).unwrap(),
        };
    }
    let n = tp.l2_norm(cur);
    let m = tp.mean(cur);
    let lse = tp.logsumexp_rows(cur);
    let lse = tp.sum(lse);
    let t = tp.add(n, m).unwrap();
    tp.add(t, lse).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_compositions_match_finite_differences(seed in any::<u64>(), ops in prop::collection::vec(any::<u8>(), 1..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[3, 4], 10.0),
            random(&mut rng, &[3, 4], 10.0),
            random(&mut rng, &[4, 3], 1.0),
            random(&mut rng, &[4], 10.0),
        ];
        let err = check_grads(&inputs, &|tp, v| random_program(tp, v, &ops));
        prop_assert!(err < 1e-4, "ops {:?} rel err {}", ops, err);
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>(), ops in prop::collection::vec(any::<u8>(), 1..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[3, 4], 3.0),
            random(&mut rng, &[3, 4], 3.0),
            random(&mut rng, &[4, 3], 3.0),
            random(&mut rng, &[4], 3.0),
        ];
        let run = || {
            let mut tp = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| tp.constant(x.clone())).collect();
            let o = random_program(&mut tp, &vs, &ops);
            tp.scalar_value(o).to_bits()
        };
        prop_assert_eq!(run(), run());
    }
}
