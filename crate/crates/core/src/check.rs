//! Independent numerical verification helpers.
//!
//! These deliberately avoid the tape: central finite differences give an
//! oracle for every autodiff gradient in the crate, and the comparison
//! helper defines the relative-error convention used by the equivalence
//! tests.

/// Central finite-difference gradient of `f` at `x` with the given step.
pub fn finite_difference_gradient<F>(f: &mut F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error `|a-b| / max(floor, |a|, |b|)`.
/// `floor` keeps near-zero gradients from blowing the ratio up on
/// finite-difference noise.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / floor.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
