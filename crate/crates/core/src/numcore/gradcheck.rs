//! Central-difference gradient oracle.

use super::array::Array;

/// Default step for 64-bit checks.
pub const FD_EPS: f64 = 1e-4;

/// `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate of `theta`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Array<f64>) -> f64,
    theta: &Array<f64>,
    eps: f64,
) -> Array<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = theta.clone();
    let mut grad = Array::zeros(theta.shape());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Max-norm relative error `max|a−b| / max(max|a|, max|b|, floor)`.
///
/// Elementwise relative error blows up on coordinates whose true
/// derivative is near zero, so the error is scaled by the largest
/// magnitude in either gradient instead.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-10f64, |m, v| m.max(v.abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let theta = Array::new(vec![1], vec![3.0]).unwrap();
        let g = finite_difference_gradient(|t| t.data()[0].powi(2), &theta, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_of_sines() {
        let theta = Array::new(vec![4], vec![0.1, -1.3, 2.0, 0.7]).unwrap();
        let g = finite_difference_gradient(|t| t.data().iter().map(|x| x.sin()).sum(), &theta, 1e-4);
        for (gi, ti) in g.data().iter().zip(theta.data()) {
            assert!((gi - ti.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn relative_error_is_scale_aware() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0, 1e-9], &[2.0, 0.0]) - 5e-10).abs() < 1e-15);
    }
}
