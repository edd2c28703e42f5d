mod common;

use common::random;
use uniblend::gradcheck::{relative_error, run_grad_suite, TOL_F32, TOL_F64};
use uniblend::losses::{grad_loss, mask_loss, rec_loss};
use uniblend::tensor::{Tensor, Var};
use uniblend::train::{adam_step, AdamState};
use uniblend::{Graph, ModelParams, Precision};

const H: f64 = 1e-5;

/// Central difference of `f` at every entry of `x`, next to the reverse-mode
/// gradient of the same scalar.
fn compare(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv);
    g.backward(y).unwrap();
    let analytic = g.grad(xv).unwrap().to_vec();
    let eval = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = f(&mut g, xv);
        g.scalar(y)
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let numeric = (eval(p) - eval(m)) / (2.0 * H);
        worst = worst.max(relative_error(a, numeric, 1e-8));
    }
    worst
}

#[test]
fn mul_gradient_matches_differences() {
    let b = random(&[2, 3], 2);
    let err = compare(&random(&[2, 3], 1), |g, a| {
        let bv = g.constant(b.clone());
        let p = g.mul(a, bv).unwrap();
        g.sum(p)
    });
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn sigmoid_gradient_at_two() {
    let x = Tensor::<f64>::full(&[1], 2.0).unwrap();
    let err = compare(&x, |g, v| {
        let s = g.sigmoid(v);
        g.sum(s)
    });
    assert!(err <= 1e-5, "{err}");
    let s = 1.0 / (1.0 + (-2.0f64).exp());
    let mut g = Graph::new();
    let v = g.param(x);
    let y = g.sigmoid(v);
    let y = g.sum(y);
    g.backward(y).unwrap();
    assert!((g.grad(v).unwrap()[0] - s * (1.0 - s)).abs() < 1e-15);
}

#[test]
fn pooling_gradient_is_uniform() {
    let x = random(&[1, 2, 3, 3], 4);
    let w = random(&[1, 2, 1, 1], 5);
    let err = compare(&x, |g, v| {
        let p = g.global_avg_pool(v).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(p, wv).unwrap();
        g.sum(p)
    });
    assert!(err <= 1e-5, "{err}");

    let mut g = Graph::new();
    let v = g.param(x);
    let p = g.global_avg_pool(v).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| (d - 1.0 / 9.0).abs() < 1e-15));
}

#[test]
fn l1_gradient_is_sign_over_count() {
    let out = random(&[1, 3, 4, 4], 6);
    let gt = random(&[1, 3, 4, 4], 7);
    let mut g = Graph::new();
    let (o, t) = (g.param(out.clone()), g.constant(gt.clone()));
    let l = rec_loss(&mut g, o, t).unwrap();
    g.backward(l).unwrap();
    let n = out.numel() as f64;
    for ((d, a), b) in g.grad(o).unwrap().iter().zip(out.data()).zip(gt.data()) {
        assert_eq!(*d, (a - b).signum() / n);
    }
    let err = compare(&out, |g, v| {
        let t = g.constant(gt.clone());
        rec_loss(g, v, t).unwrap()
    });
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn gradient_and_mask_losses_match_differences() {
    let out = random(&[1, 2, 5, 6], 8);
    let gt = random(&[1, 2, 5, 6], 9);
    let err = compare(&out, |g, v| {
        let t = g.constant(gt.clone());
        grad_loss(g, v, t).unwrap()
    });
    assert!(err <= 1e-5, "{err}");

    let pred = Tensor::<f64>::create(&[1, 1, 4, 4], uniblend::tensor::Fill::Uniform { lo: 0.1, hi: 0.9, seed: 3 }).unwrap();
    let target = Tensor::from_f64(&[1, 1, 4, 4], &[1., 0., 0., 1., 1., 1., 0., 0., 0., 1., 0., 1., 1., 0., 1., 0.]).unwrap();
    let err = compare(&pred, |g, v| {
        let t = g.constant(target.clone());
        mask_loss(g, v, t).unwrap()
    });
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn full_suite_passes_in_both_precisions() {
    let r = run_grad_suite(7, Precision::F64).unwrap();
    assert_eq!(r.tolerance, TOL_F64);
    for op in &r.ops {
        assert!(op.passed, "{op:?}");
    }
    let model = r.ops.iter().find(|o| o.op == "model").unwrap();
    assert!(model.entries >= 20);

    let r = run_grad_suite(7, Precision::F32).unwrap();
    assert_eq!(r.tolerance, TOL_F32);
    assert!(r.passed(), "{:?}", r.worst());
}

fn params_with(v: &[f64], grad: &[f64]) -> ModelParams<f64> {
    let mut p = ModelParams::empty();
    let mut t = Tensor::from_vec(&[v.len()], v.to_vec()).unwrap();
    t.grad = Some(grad.to_vec());
    p.insert("w", t).unwrap();
    p
}

#[test]
fn adam_matches_hand_unrolled_recurrence() {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let p0 = [0.5, -1.25, 3.0];
    let grads = [[0.3, -2.0, 1e-3], [0.3, -2.0, 1e-3]];

    let mut p = params_with(&p0, &grads[0]);
    let mut state = AdamState::new(&p, lr);
    adam_step(&mut p, &mut state).unwrap();
    p.get_mut("w").unwrap().grad = Some(grads[1].to_vec());
    adam_step(&mut p, &mut state).unwrap();
    assert_eq!(state.t, 2);

    for i in 0..3 {
        let g = grads[0][i];
        // step 1
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let p1 = p0[i] - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        // step 2
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        let got = p.get("w").unwrap().data()[i];
        assert!((got - p2).abs() <= 1e-10, "{i}: {got} vs {p2}");
        assert!((state.first_moment("w").unwrap()[i] - m2).abs() <= 1e-15);
        assert!((state.second_moment("w").unwrap()[i] - v2).abs() <= 1e-15);
    }
    assert!(p.get("w").unwrap().grad.is_none());
}

#[test]
fn adam_steps_scale_with_lr() {
    let history: Vec<Vec<f64>> = (0..5)
        .map(|s| random(&[4], 30 + s).data().iter().map(|v| v * 3.0).collect())
        .collect();
    let run = |lr: f64| {
        let mut p = params_with(&[0.0; 4], &history[0]);
        let mut state = AdamState::new(&p, lr);
        let mut deltas = Vec::new();
        for g in &history {
            p.get_mut("w").unwrap().grad = Some(g.clone());
            let before = p.get("w").unwrap().data().to_vec();
            adam_step(&mut p, &mut state).unwrap();
            let after = p.get("w").unwrap().data();
            deltas.push(after.iter().zip(&before).map(|(a, b)| a - b).collect::<Vec<_>>());
        }
        deltas
    };
    let (a, b) = (run(1e-4), run(2e-4));
    for (da, db) in a.iter().zip(&b) {
        for (x, y) in da.iter().zip(db) {
            assert!((2.0 * x - y).abs() <= 1e-12, "{x} {y}");
        }
    }
}
