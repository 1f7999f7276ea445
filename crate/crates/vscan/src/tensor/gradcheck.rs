//! Finite-difference utilities for verifying analytic gradients.
//!
//! These helpers exist for test and acceptance code: they evaluate a scalar
//! function of a flat `f64` buffer with central differences and compare the
//! result against gradients produced by the tape. Run them on `Graph<f64>`
//! so the differencing itself is done at wide precision.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut buf = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Maximum relative error between two gradient vectors. The denominator is
/// floored at `floor` so agreement on near-zero entries is judged
/// absolutely rather than blowing up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3 x1
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_diff(f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_uses_floor_near_zero() {
        assert!(max_rel_err(&[1e-12], &[0.0], 1e-6) < 1e-5);
        assert!(max_rel_err(&[1.0], &[1.1], 1e-6) > 0.05);
    }
}
