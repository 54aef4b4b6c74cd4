//! Finite-difference verification of every tape primitive, plus composite
//! graphs (MLP forward, convolution + pooling pipelines).
//!
//! Tolerance discipline: analytic vs central differences (step 1e-5) must
//! agree to relative error 1e-4 with a 1e-8 absolute floor.

mod common;

use common::{assert_all_close, finite_diff_grad};
use fmplug::autodiff::{Tape, Tensor, Var};
use fmplug::rng::{rng_from_seed, standard_normal};

const FD_STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-8;

/// Check d(sum of some scalar readout)/dx for a graph builder against finite
/// differences, at several random points in [-2, 2]^n (shifted for ops with
/// restricted domains).
fn check_unary(
    name: &str,
    n: usize,
    lo: f64,
    hi: f64,
    build: impl Fn(&Var) -> Var,
) {
    let mut rng = rng_from_seed(0x5eed ^ n as u64 ^ name.len() as u64);
    for trial in 0..5 {
        let x: Vec<f64> = standard_normal(&mut rng, n)
            .into_iter()
            .map(|g| lo + (hi - lo) * (0.5 + 0.5 * g.tanh()))
            .collect();
        let eval = |x: &[f64]| -> f64 {
            let tape = Tape::new();
            let xv = tape.leaf(Tensor::from_vec(x.to_vec()));
            build(&xv).value().item()
        };
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(x.clone()));
        let loss = build(&xv);
        let analytic = tape.backward(&loss, &[&xv]).unwrap();
        let oracle = finite_diff_grad(&eval, &x, FD_STEP);
        assert_all_close(
            analytic[0].data(),
            &oracle,
            RTOL,
            ATOL,
            &format!("{name} trial {trial}"),
        );
    }
}

#[test]
fn grad_add_sub_mul_neg() {
    check_unary("add", 6, -2.0, 2.0, |x| {
        let half = x.scale(0.5);
        (x.add(&half)).square().sum()
    });
    check_unary("sub", 6, -2.0, 2.0, |x| {
        let sq = x.square();
        (x.sub(&sq)).square().sum()
    });
    check_unary("mul", 6, -2.0, 2.0, |x| {
        let shifted = x.add_scalar(0.3);
        (x.mul(&shifted)).sum()
    });
    check_unary("neg", 6, -2.0, 2.0, |x| x.neg().mul(x).sum());
}

#[test]
fn grad_scalar_ops() {
    check_unary("add_scalar", 4, -2.0, 2.0, |x| x.add_scalar(1.7).square().sum());
    check_unary("scale", 4, -2.0, 2.0, |x| x.scale(-2.5).square().sum());
}

#[test]
fn grad_activations() {
    check_unary("tanh", 5, -2.0, 2.0, |x| x.tanh().sum());
    check_unary("relu", 5, -2.0, 2.0, |x| x.relu().square().sum());
    check_unary("sigmoid", 5, -2.0, 2.0, |x| x.sigmoid().sum());
    check_unary("exp", 5, -2.0, 2.0, |x| x.exp().sum());
    check_unary("sin", 5, -2.0, 2.0, |x| x.sin().sum());
    check_unary("cos", 5, -2.0, 2.0, |x| x.cos().sum());
    // log and sqrt need positive inputs
    check_unary("log", 5, 0.5, 2.5, |x| x.log().sum());
    check_unary("sqrt", 5, 0.5, 2.5, |x| x.sqrt().sum());
}

#[test]
fn grad_reductions_and_norm() {
    check_unary("sum", 7, -2.0, 2.0, |x| x.square().sum());
    check_unary("mean", 7, -2.0, 2.0, |x| x.square().mean());
    check_unary("l2_norm", 7, 0.5, 2.0, |x| x.l2_norm());
}

#[test]
fn grad_broadcast_concat_slice_reshape() {
    check_unary("broadcast", 1, -2.0, 2.0, |s| {
        s.broadcast_to(&[4]).square().sum()
    });
    check_unary("concat_slice", 6, -2.0, 2.0, |x| {
        let head = x.slice(0, 3);
        let tail = x.slice(3, 3);
        Var::concat(&[tail.square(), head.clone()]).sum()
    });
    check_unary("reshape", 6, -2.0, 2.0, |x| {
        x.reshape(&[2, 3]).square().sum()
    });
}

#[test]
fn grad_matmul_both_sides() {
    // loss = sum((A @ b)^2) with both A and b differentiable
    let mut rng = rng_from_seed(11);
    let a0 = standard_normal(&mut rng, 12);
    let b0 = standard_normal(&mut rng, 4);

    let eval = |joint: &[f64]| -> f64 {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(joint[..12].to_vec(), vec![3, 4]));
        let b = tape.leaf(Tensor::new(joint[12..].to_vec(), vec![4]));
        a.matmul(&b).square().sum().value().item()
    };
    let joint: Vec<f64> = a0.iter().chain(b0.iter()).copied().collect();

    let tape = Tape::new();
    let a = tape.leaf(Tensor::new(a0.clone(), vec![3, 4]));
    let b = tape.leaf(Tensor::new(b0.clone(), vec![4]));
    let loss = a.matmul(&b).square().sum();
    let grads = tape.backward(&loss, &[&a, &b]).unwrap();
    let analytic: Vec<f64> =
        grads[0].data().iter().chain(grads[1].data().iter()).copied().collect();
    let oracle = finite_diff_grad(&eval, &joint, FD_STEP);
    assert_all_close(&analytic, &oracle, RTOL, ATOL, "matmul");
}

#[test]
fn grad_matmul_2d_by_2d() {
    let mut rng = rng_from_seed(12);
    let a0 = standard_normal(&mut rng, 6);
    let b0 = standard_normal(&mut rng, 6);
    let eval = |joint: &[f64]| -> f64 {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(joint[..6].to_vec(), vec![2, 3]));
        let b = tape.leaf(Tensor::new(joint[6..].to_vec(), vec![3, 2]));
        a.matmul(&b).square().sum().value().item()
    };
    let joint: Vec<f64> = a0.iter().chain(b0.iter()).copied().collect();
    let tape = Tape::new();
    let a = tape.leaf(Tensor::new(a0, vec![2, 3]));
    let b = tape.leaf(Tensor::new(b0, vec![3, 2]));
    let loss = a.matmul(&b).square().sum();
    let grads = tape.backward(&loss, &[&a, &b]).unwrap();
    let analytic: Vec<f64> =
        grads[0].data().iter().chain(grads[1].data().iter()).copied().collect();
    assert_all_close(&analytic, &finite_diff_grad(&eval, &joint, FD_STEP), RTOL, ATOL, "matmul2d");
}

#[test]
fn grad_conv2d_input_and_kernel() {
    let mut rng = rng_from_seed(13);
    let x0 = standard_normal(&mut rng, 36);
    let k0 = standard_normal(&mut rng, 9);
    let eval = |joint: &[f64]| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(joint[..36].to_vec(), vec![6, 6]));
        let k = tape.leaf(Tensor::new(joint[36..].to_vec(), vec![3, 3]));
        x.conv2d_reflect(&k).square().sum().value().item()
    };
    let joint: Vec<f64> = x0.iter().chain(k0.iter()).copied().collect();
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(x0, vec![6, 6]));
    let k = tape.leaf(Tensor::new(k0, vec![3, 3]));
    let loss = x.conv2d_reflect(&k).square().sum();
    let grads = tape.backward(&loss, &[&x, &k]).unwrap();
    let analytic: Vec<f64> =
        grads[0].data().iter().chain(grads[1].data().iter()).copied().collect();
    assert_all_close(&analytic, &finite_diff_grad(&eval, &joint, FD_STEP), RTOL, ATOL, "conv2d");
}

#[test]
fn grad_avg_pool() {
    check_unary("avg_pool", 16, -2.0, 2.0, |x| {
        x.reshape(&[4, 4]).avg_pool(2).square().sum()
    });
}

#[test]
fn grad_two_layer_tanh_mlp_matches_fd() {
    // The derived oracle case: a full 2-layer tanh MLP loss, checked against
    // central differences at step 1e-5 with relative error < 1e-4.
    let (d_in, d_hidden, d_out) = (3, 8, 3);
    let mut rng = rng_from_seed(21);
    let w1 = standard_normal(&mut rng, d_hidden * d_in);
    let b1 = standard_normal(&mut rng, d_hidden);
    let w2 = standard_normal(&mut rng, d_out * d_hidden);
    let b2 = standard_normal(&mut rng, d_out);
    let input = Tensor::from_vec(standard_normal(&mut rng, d_in));
    let target = Tensor::from_vec(standard_normal(&mut rng, d_out));

    let sizes = [d_hidden * d_in, d_hidden, d_out * d_hidden, d_out];
    let forward = |theta: &[f64]| -> f64 {
        let mut off = 0;
        let mut parts: Vec<Vec<f64>> = Vec::new();
        for s in sizes {
            parts.push(theta[off..off + s].to_vec());
            off += s;
        }
        let tape = Tape::new();
        let w1 = tape.leaf(Tensor::new(parts[0].clone(), vec![d_hidden, d_in]));
        let b1 = tape.leaf(Tensor::new(parts[1].clone(), vec![d_hidden]));
        let w2 = tape.leaf(Tensor::new(parts[2].clone(), vec![d_out, d_hidden]));
        let b2 = tape.leaf(Tensor::new(parts[3].clone(), vec![d_out]));
        let x = tape.constant(input.clone());
        let t = tape.constant(target.clone());
        let hidden = (w1.matmul(&x) + b1).tanh();
        let out = w2.matmul(&hidden) + b2;
        (out - t).square().sum().value().item()
    };

    let theta: Vec<f64> =
        [&w1[..], &b1[..], &w2[..], &b2[..]].concat();

    let tape = Tape::new();
    let w1v = tape.leaf(Tensor::new(w1, vec![d_hidden, d_in]));
    let b1v = tape.leaf(Tensor::new(b1, vec![d_hidden]));
    let w2v = tape.leaf(Tensor::new(w2, vec![d_out, d_hidden]));
    let b2v = tape.leaf(Tensor::new(b2, vec![d_out]));
    let x = tape.constant(input.clone());
    let t = tape.constant(target.clone());
    let hidden = (w1v.matmul(&x) + b1v.clone()).tanh();
    let out = w2v.matmul(&hidden) + b2v.clone();
    let loss = (out - t).square().sum();
    let grads = tape.backward(&loss, &[&w1v, &b1v, &w2v, &b2v]).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

    let oracle = finite_diff_grad(&forward, &theta, FD_STEP);
    assert_all_close(&analytic, &oracle, RTOL, ATOL, "two-layer tanh MLP");
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a*f + b*g) == a*grad(f) + b*grad(g), elementwise to 1e-10.
    let mut rng = rng_from_seed(31);
    let x0 = standard_normal(&mut rng, 5);
    let (a, b) = (1.75, -0.4);

    let grad_of = |scale_f: f64, scale_g: f64, x0: &[f64]| -> Vec<f64> {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(x0.to_vec()));
        let f = x.square().sum().scale(scale_f);
        let g = x.sin().sum().scale(scale_g);
        let loss = f + g;
        tape.backward(&loss, &[&x]).unwrap()[0].data().to_vec()
    };

    let combined = grad_of(a, b, &x0);
    let f_only = grad_of(1.0, 0.0, &x0);
    let g_only = grad_of(0.0, 1.0, &x0);
    for i in 0..x0.len() {
        let expect = a * f_only[i] + b * g_only[i];
        assert!(
            (combined[i] - expect).abs() < 1e-10,
            "linearity violated at {i}: {} vs {}",
            combined[i],
            expect
        );
    }
}
