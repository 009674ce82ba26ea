//! Central finite-difference gradient checking. Everything here evaluates the
//! loss through *forward* passes only, so it stays independent of the
//! reverse-mode sweep it is used to verify.

/// Central-difference gradient of `f` at `x`, one forward pair per coordinate.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Elementwise relative error with a floor on the denominator so exact zeros
/// compare by absolute difference.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
