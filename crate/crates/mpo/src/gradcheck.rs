//! Central finite-difference oracles for gradient checking.
//!
//! These are intentionally independent of every analytic gradient in the
//! crate: they only evaluate the loss function being checked.

/// Central difference `(f(x+h) - f(x-h)) / 2h` of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient of `f` at `params`, perturbing one coordinate
/// at a time.
pub fn grad_central_diff(params: &[f64], f: impl Fn(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Norm-wise relative error `|a - b|_2 / max(|b|_2, floor)`.
pub fn rel_l2_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Relative error of two scalars against the larger magnitude.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
