use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().chain(a).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Central differences of a scalar function, written without the tape.
fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

fn eval(f: &impl Fn(&mut Tape, Var) -> Var, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.var(Tensor::row(x.to_vec()));
    let out = f(&mut tape, v);
    tape.value(out).item()
}

#[test]
fn square_and_sum() {
    let g = grad(|t, x| t.dot(x, x), &[3.0]).unwrap();
    assert_eq!(g, vec![6.0]);
    let g = grad(|t, x| t.sum(x), &[1.0, -2.0, 5.5]).unwrap();
    assert_eq!(g, vec![1.0; 3]);
}

/// Logistic regression on 3 examples, 2 features (+bias), 2 classes.
fn toy_logistic(t: &mut Tape, w: Var) -> Var {
    let x = t.constant(Tensor::new(3, 3, vec![0.5, -1.0, 1.0, 1.5, 0.2, 1.0, -0.3, 0.8, 1.0]));
    let wm = t.reshape(w, 3, 2);
    let logits = t.matmul(x, wm);
    t.softmax_cross_entropy(logits, Rc::from(vec![0usize, 1, 1]))
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let w = [0.1, -0.2, 0.3, 0.05, -0.4, 0.25];
    let g = grad(toy_logistic, &w).unwrap();
    let fd = fd_grad(|x| eval(&toy_logistic, x), &w, 1e-5);
    assert!(max_rel_err(&g, &fd) <= 1e-7, "{g:?} vs {fd:?}");
}

/// Exercises every primitive on a smooth region.
fn kitchen_sink(t: &mut Tape, x: Var) -> Var {
    let a = t.slice(x, 0, 2, 3);
    let b = t.slice(x, 6, 3, 2);
    let ab = t.matmul(a, b);
    let th = t.tanh(ab);
    let e = t.exp(th);
    let l = t.log(e);
    let s = t.softmax(l);
    let s1 = t.add_scalar(s, 1.0);
    let r = t.recip(s1);
    let bt = t.transpose(b);
    let sr = t.sum_rows(bt);
    let br = t.broadcast_rows(sr, 2);
    let sc = t.sum_cols(br);
    let bc = t.broadcast_cols(sc, 2);
    let m = t.mul(r, bc);
    let relu_in = t.add_scalar(m, 10.0);
    let rl = t.relu(relu_in);
    let g = t.gather_rows(a, Rc::from(vec![1usize, 0, 1]));
    let sc2 = t.scatter_rows(g, Rc::from(vec![0usize, 0, 1]), 2);
    let emb = t.embed(rl, 1, 1, 6);
    let flat = t.reshape(sc2, 1, 6);
    let prod = t.mul(emb, flat);
    let neg = t.neg(prod);
    let sc3 = t.scale(neg, 0.5);
    let tot = t.sum(sc3);
    let bs = t.broadcast_scalar(tot, 2, 3);
    let ce = t.softmax_cross_entropy(bs, Rc::from(vec![0usize, 2]));
    let z = t.sub(ce, tot);
    let z2 = t.mul(z, z);
    t.sum(z2)
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = grad(kitchen_sink, &x).unwrap();
        let fd = fd_grad(|p| eval(&kitchen_sink, p), &x, 1e-5);
        assert!(max_rel_err(&g, &fd) <= 1e-6, "{g:?} vs {fd:?}");
    }
}

fn quadratic() -> FnLoss<impl Fn(&mut Tape, Var, Var, usize) -> Var> {
    FnLoss {
        dim_w: 2,
        dim_theta: 0,
        body: |t: &mut Tape, w: Var, _th: Var, _step: usize| {
            let a = t.constant(Tensor::row(vec![2.0, 4.0]));
            let aw = t.mul(a, w);
            let q = t.dot(w, aw);
            t.scale(q, 0.5)
        },
    }
}

#[test]
fn hvp_of_quadratic_is_the_matrix() {
    let f = quadratic();
    assert_eq!(hvp_ww(&f, &[0.3, -0.7], &[], 0, &[1.0, 1.0]).unwrap(), vec![2.0, 4.0]);
    assert_eq!(hvp_ww(&f, &[0.3, -0.7], &[], 0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    let cols: Vec<Vec<f64>> = [[1.0, 0.0], [0.0, 1.0]].iter().map(|e| hvp_ww(&f, &[1.0, 2.0], &[], 0, e).unwrap()).collect();
    assert_eq!(cols, vec![vec![2.0, 0.0], vec![0.0, 4.0]]);
}

#[test]
fn dense_quadratic_hessian_assembles_exactly() {
    // 0.5 w^T (M^T M) w with M small integers: products are exact in f64.
    let m = Tensor::new(3, 3, vec![1.0, 2.0, 0.0, -1.0, 1.0, 3.0, 2.0, 0.0, 1.0]);
    let explicit = m.transpose().matmul(&m);
    let f = FnLoss {
        dim_w: 3,
        dim_theta: 0,
        body: move |t: &mut Tape, w: Var, _th: Var, _step: usize| {
            let mv = t.constant(m.clone());
            let wc = t.reshape(w, 3, 1);
            let mw = t.matmul(mv, wc);
            let q = t.dot(mw, mw);
            t.scale(q, 0.5)
        },
    };
    for j in 0..3 {
        let mut e = vec![0.0; 3];
        e[j] = 1.0;
        let col = hvp_ww(&f, &[0.5, -1.0, 2.0], &[], 0, &e).unwrap();
        for i in 0..3 {
            assert_eq!(col[i], explicit.at(i, j));
        }
    }
}

#[test]
fn hvp_theta_of_log_scaled_penalty() {
    let f = FnLoss {
        dim_w: 3,
        dim_theta: 3,
        body: |t: &mut Tape, w: Var, th: Var, _step: usize| {
            let e = t.exp(th);
            let ww = t.mul(w, w);
            let p = t.dot(e, ww);
            t.scale(p, 0.5)
        },
    };
    let w = [1.0, -2.0, 0.5];
    let theta = [0.0, 0.3, -1.2];
    let u = [0.7, 0.1, -2.0];
    let got = hvp_thetaw(&f, &w, &theta, 0, &u).unwrap();
    let want: Vec<f64> = (0..3).map(|i| u[i] * theta[i].exp() * w[i]).collect();
    assert!(max_rel_err(&got, &want) < 1e-15);
}

#[test]
fn unused_theta_has_zero_mixed_hvp() {
    let f = FnLoss {
        dim_w: 2,
        dim_theta: 4,
        body: |t: &mut Tape, w: Var, _th: Var, _step: usize| {
            let e = t.exp(w);
            t.sum(e)
        },
    };
    let got = hvp_thetaw(&f, &[0.1, 0.2], &[1.0; 4], 0, &[1.0, 1.0]).unwrap();
    assert_eq!(got, vec![0.0; 4]);
}

fn smooth_loss() -> FnLoss<impl Fn(&mut Tape, Var, Var, usize) -> Var> {
    FnLoss {
        dim_w: 6,
        dim_theta: 6,
        body: |t: &mut Tape, w: Var, th: Var, _step: usize| {
            let x = t.constant(Tensor::new(4, 2, vec![0.3, -1.0, 1.2, 0.4, -0.5, 0.9, 0.0, -0.2]));
            let wm = t.reshape(w, 2, 3);
            let logits = t.matmul(x, wm);
            let h = t.tanh(logits);
            let ce = t.softmax_cross_entropy(h, Rc::from(vec![0usize, 2, 1, 2]));
            let e = t.exp(th);
            let ww = t.mul(w, w);
            let wt = t.mul(ww, th);
            let pen = t.dot(e, ww);
            let pen2 = t.sum(wt);
            let p = t.add(pen, pen2);
            let p = t.scale(p, 0.1);
            t.add(ce, p)
        },
    }
}

#[test]
fn hvps_match_finite_differences_of_gradients() {
    let f = smooth_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let so = grad_and_hvps(&f, &w, &th, 0, &u).unwrap();
        let gdot = |w: &[f64], th: &[f64]| -> f64 {
            let g = value_and_grad(&f, w, th, 0).unwrap().1;
            g.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let fd_w = fd_grad(|p| gdot(p, &th), &w, 1e-5);
        let fd_t = fd_grad(|p| gdot(&w, p), &th, 1e-5);
        assert!(max_rel_err(&so.hvp_w, &fd_w) <= 1e-6);
        assert!(max_rel_err(&so.hvp_theta, &fd_t) <= 1e-6);
    }
}

#[test]
fn hvp_is_symmetric() {
    let f = smooth_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = hvp_ww(&f, &w, &th, 0, &v).unwrap();
        let hu = hvp_ww(&f, &w, &th, 0, &u).unwrap();
        let a: f64 = u.iter().zip(&hv).map(|(x, y)| x * y).sum();
        let b: f64 = v.iter().zip(&hu).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn nested_gradient_equals_hvp() {
    let f = smooth_loss();
    let th = vec![0.2; 6];
    let w = vec![0.3, -0.1, 0.5, 0.8, -0.6, 0.05];
    let u = vec![1.0, 0.0, -1.0, 0.5, 0.25, 2.0];
    let hvp = hvp_ww(&f, &w, &th, 0, &u).unwrap();
    let nested = grad(
        |t, x| {
            let thv = t.constant(Tensor::row(th.clone()));
            let out = f.record(t, x, thv, 0).unwrap();
            let [g] = t.backward(out, &[x])[..] else { unreachable!() };
            let uv = t.constant(Tensor::row(u.clone()));
            t.dot(g, uv)
        },
        &w,
    )
    .unwrap();
    assert!(max_rel_err(&nested, &hvp) < 1e-14);
}

#[test]
fn tape_stays_topologically_ordered() {
    let f = smooth_loss();
    let mut tape = Tape::new();
    let w = tape.var(Tensor::row(vec![0.1; 6]));
    let th = tape.var(Tensor::row(vec![0.1; 6]));
    let out = f.record(&mut tape, w, th, 0).unwrap();
    let [g] = tape.backward(out, &[w])[..] else { unreachable!() };
    let u = tape.constant(Tensor::row(vec![1.0; 6]));
    let d = tape.dot(g, u);
    tape.backward(d, &[w, th]);
    assert!(tape.parents_precede_children());
}

#[test]
fn non_finite_reports_node() {
    let err = grad(
        |t, x| {
            let n = t.neg(x);
            let l = t.log(n);
            t.sum(l)
        },
        &[1.0],
    )
    .unwrap_err();
    match err {
        Error::NonFinite { node, op } => {
            assert_eq!(op, "log");
            assert_eq!(node, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn relu_kink_has_zero_subgradient() {
    let g = grad(
        |t, x| {
            let r = t.relu(x);
            t.sum(r)
        },
        &[0.0, 1.0, -1.0],
    )
    .unwrap();
    assert_eq!(g, vec![0.0, 1.0, 0.0]);
}

#[test]
fn wrong_lengths_are_rejected() {
    let f = quadratic();
    assert!(matches!(hvp_ww(&f, &[1.0], &[], 0, &[1.0]), Err(Error::Shape(_))));
    assert!(matches!(hvp_ww(&f, &[1.0, 2.0], &[], 0, &[1.0]), Err(Error::Shape(_))));
}
