use std::sync::Arc;

use irmkit::diff::{finite_diff_check, forward, numeric_grad, Tape, Tensor, Var};
use irmkit::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::*;

#[test]
fn every_primitive_matches_finite_differences_at_100_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, f, shapes, range) in primitive_cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let xs = sample_inputs(&mut rng, &shapes, range);
            worst = worst.max(finite_diff_check(&f, &xs, 1e-6).unwrap());
        }
        assert!(worst <= 1e-4, "{name}: max rel error {worst:e}");
    }
}

#[test]
fn every_primitive_has_a_correct_double_backward_rule() {
    // h(x) = Σ c ⊙ ∇f(x); its gradient runs through the recorded backward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (name, f, shapes, range) in primitive_cases() {
        let h = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let out = f(t, v)?;
            let grads = t.grad_graph(out, v)?;
            let mut terms = Vec::new();
            for (k, g) in grads.into_iter().enumerate() {
                terms.push(weighted_sum(t, g, 100 + k as u64)?);
            }
            t.add_all(&terms)
        };
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let xs = sample_inputs(&mut rng, &shapes, range);
            worst = worst.max(finite_diff_check(h, &xs, 1e-5).unwrap());
        }
        assert!(worst <= 1e-4, "{name}: second-order max rel error {worst:e}");
    }
}

#[test]
fn forward_examples() {
    let (out, tape, _) = forward(&[Tensor::scalar(3.0)], |t, v| t.square(v[0])).unwrap();
    assert_eq!(tape.scalar(out), 9.0);
    // one leaf plus one primitive
    assert_eq!(tape.len(), 2);
    assert_eq!(tape.op_name(out), "square");

    let (out, tape, _) = forward(&[Tensor::vector(vec![1.0, 2.0, 3.0])], |t, v| t.sum(v[0])).unwrap();
    assert_eq!(tape.scalar(out), 6.0);

    let (out, tape, _) = forward(&[Tensor::vector(vec![0.0])], |t, v| {
        t.bce_with_logits(v[0], Arc::new(vec![1.0]))
    })
    .unwrap();
    assert!((tape.scalar(out) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn grad_examples() {
    let (out, mut tape, v) = forward(&[Tensor::scalar(3.0)], |t, v| t.square(v[0])).unwrap();
    assert_eq!(tape.grad(out, &v).unwrap()[0].item(), 6.0);

    let (out, mut tape, v) =
        forward(&[Tensor::scalar(1.5), Tensor::scalar(-4.0)], |t, v| t.add(v[0], v[1])).unwrap();
    let g = tape.grad(out, &v).unwrap();
    assert_eq!((g[0].item(), g[1].item()), (1.0, 1.0));
}

/// ℓ(w, θ) = (wθ)², P(θ) = (∂ℓ/∂w)² = 4w²θ⁴, ∂P/∂θ = 16w²θ³.
#[test]
fn gradient_of_gradient_norm_matches_hand_derivation() {
    let penalty = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let (w, theta) = (v[0], v[1]);
        let p = t.mul(w, theta)?;
        let loss = t.square(p)?;
        let gw = t.grad_graph(loss, &[w])?;
        t.norm_sq(gw[0])
    };
    let inputs = [Tensor::scalar(1.0), Tensor::scalar(2.0)];
    let (out, mut tape, v) = forward(&inputs, penalty).unwrap();
    assert_eq!(tape.scalar(out), 64.0);
    let g = tape.grad(out, &v[1..]).unwrap();
    assert!((g[0].item() - 128.0).abs() < 1e-12);

    // the same value from finite differences of P
    let num = numeric_grad(penalty, &inputs, 1e-5).unwrap();
    assert!((num[1].item() - 128.0).abs() / 128.0 < 1e-6);
}

#[test]
fn second_order_polynomial_and_logistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x0: f64 = rng.random_range(-2.0..2.0);
        // f = x³ + 2x² → f'' = 6x + 4
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0)).unwrap();
        let x2 = tape.square(x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let t2 = tape.scale_const(x2, 2.0).unwrap();
        let f = tape.add(x3, t2).unwrap();
        let d1 = tape.grad_graph(f, &[x]).unwrap()[0];
        assert!((tape.scalar(d1) - (3.0 * x0 * x0 + 4.0 * x0)).abs() < 1e-12);
        let d2 = tape.grad(d1, &[x]).unwrap()[0].item();
        let want = 6.0 * x0 + 4.0;
        assert!((d2 - want).abs() / want.abs().max(1e-8) <= 1e-4);

        // σ'' = σ(1-σ)(1-2σ)
        let (s, mut tape, v) = forward(&[Tensor::scalar(x0)], |t, v| t.sigmoid(v[0])).unwrap();
        let sv = tape.scalar(s);
        let d1 = tape.grad_graph(s, &v).unwrap()[0];
        let d2 = tape.grad(d1, &v).unwrap()[0].item();
        let want = sv * (1.0 - sv) * (1.0 - 2.0 * sv);
        assert!((d2 - want).abs() / want.abs().max(1e-8) <= 1e-4);

        // BCE with logits: ∂²/∂z² = σ(1-σ)
        let (l, mut tape, v) =
            forward(&[Tensor::vector(vec![x0])], |t, v| t.bce_with_logits(v[0], Arc::new(vec![1.0])))
                .unwrap();
        let d1 = tape.grad_graph(l, &v).unwrap()[0];
        let d1s = tape.sum(d1).unwrap();
        let d2 = tape.grad(d1s, &v).unwrap()[0].item();
        let want = sv * (1.0 - sv);
        assert!((d2 - want).abs() / want <= 1e-4);
        let _ = tape.value(l);
    }
}

#[test]
fn finite_diff_check_examples() {
    let cube = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let x2 = t.square(v[0])?;
        t.mul(x2, v[0])
    };
    assert!(finite_diff_check(cube, &[Tensor::scalar(2.0)], 1e-5).unwrap() <= 1e-6);
    let relu = |t: &mut Tape, v: &[Var]| t.relu(v[0]);
    assert!(finite_diff_check(relu, &[Tensor::scalar(1.0)], 1e-5).unwrap() <= 1e-8);
    // At the kink the analytic subgradient is 0 while central differences give 0.5.
    let (out, mut tape, v) = forward(&[Tensor::scalar(0.0)], relu).unwrap();
    assert_eq!(tape.grad(out, &v).unwrap()[0].item(), 0.0);
}

#[test]
fn determinism_and_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
    let labels = Arc::new(vec![1.0, 0.0, 0.0, 1.0]);
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let z = t.matmul(v[0], v[1])?;
        let z = t.sigmoid(z)?;
        t.bce_with_logits(z, labels.clone())
    };
    let g = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let z = t.matmul(v[0], v[1])?;
        let z = t.relu(z)?;
        t.norm_sq(z)
    };
    let run = || {
        let (o, mut tape, v) = forward(&[x.clone(), w.clone()], f).unwrap();
        (tape.scalar(o).to_bits(), tape.grad(o, &v).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);

    let (a_coef, b_coef) = (0.7, -2.3);
    let mut tape = Tape::new();
    let v = [tape.leaf(x.clone()).unwrap(), tape.leaf(w.clone()).unwrap()];
    let fo = f(&mut tape, &v).unwrap();
    let go = g(&mut tape, &v).unwrap();
    let fa = tape.scale_const(fo, a_coef).unwrap();
    let gb_ = tape.scale_const(go, b_coef).unwrap();
    let combo = tape.add(fa, gb_).unwrap();
    let gc = tape.grad(combo, &v).unwrap();
    let gf = tape.grad(fo, &v).unwrap();
    let gg = tape.grad(go, &v).unwrap();
    for k in 0..2 {
        for j in 0..gc[k].len() {
            let lin = a_coef * gf[k].data()[j] + b_coef * gg[k].data()[j];
            assert!((gc[k].data()[j] - lin).abs() <= 1e-12);
        }
    }
}

#[test]
fn wrt_must_be_recorded_on_the_same_tape() {
    let (out, mut tape, _) = forward(&[Tensor::scalar(1.0)], |t, v| t.square(v[0])).unwrap();
    let mut other = Tape::new();
    let foreign = other.leaf(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(tape.grad(out, &[foreign]), Err(Error::NotALeaf { .. })));
}

#[test]
fn non_finite_intermediate_is_reported_with_node_id() {
    let err = forward(&[Tensor::scalar(0.0)], |t, v| t.log(v[0])).unwrap_err();
    assert!(matches!(err, Error::FiniteViolation { node: 1 }), "{err:?}");
    let err = forward(&[Tensor::scalar(800.0)], |t, v| t.exp(v[0])).unwrap_err();
    assert!(matches!(err, Error::FiniteViolation { .. }));
}

#[test]
fn tape_is_topological_and_replays_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
    let labels = Arc::new(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    let (out, mut tape, v) = forward(&[x, w], |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let z = t.relu(z)?;
        t.bce_with_logits(z, labels.clone())
    })
    .unwrap();
    let g = tape.grad_graph(out, &v[1..]).unwrap();
    let p = tape.norm_sq(g[0]).unwrap();
    let _ = tape.grad_graph(p, &v).unwrap();
    assert!(tape.is_topologically_ordered());
    let replayed = tape.replay().unwrap();
    for (a, b) in replayed.iter().zip(tape.recorded_values()) {
        let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
}

#[test]
fn plain_grad_leaves_tape_length_unchanged() {
    let (out, mut tape, v) = forward(&[Tensor::vector(vec![1.0, 2.0])], |t, v| t.norm_sq(v[0])).unwrap();
    let before = tape.len();
    let g = tape.grad(out, &v).unwrap();
    assert_eq!(tape.len(), before);
    assert_eq!(g[0].data(), &[2.0, 4.0]);
    // gradient with respect to a node the output does not depend on is zero
    let unrelated = tape.leaf(Tensor::vector(vec![5.0])).unwrap();
    assert_eq!(tape.grad(out, &[unrelated]).unwrap()[0].data(), &[0.0]);
}
