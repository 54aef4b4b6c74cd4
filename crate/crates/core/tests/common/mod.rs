//! Shared test utilities: finite-difference oracles and tolerance helpers.
//!
//! The finite-difference code must stay independent of the tape: it only
//! ever re-evaluates a closure, so it can check any gradient the library
//! produces.

#![allow(dead_code)]

/// Central finite differences of a scalar function at `x`, step `h` per
/// coordinate.
pub fn finite_diff_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Elementwise closeness with a relative tolerance and an absolute floor:
/// |a - b| <= atol + rtol * max(|a|, |b|).
pub fn assert_all_close(actual: &[f64], expected: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
        let tol = atol + rtol * a.abs().max(e.abs());
        assert!(
            (a - e).abs() <= tol,
            "{what}[{i}]: analytic {a} vs oracle {e} (|diff| = {}, tol = {tol})",
            (a - e).abs()
        );
    }
}

pub fn max_rel_err(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    actual
        .iter()
        .zip(expected.iter())
        .map(|(a, e)| (a - e).abs() / a.abs().max(e.abs()).max(floor))
        .fold(0.0, f64::max)
}
