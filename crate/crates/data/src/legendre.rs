//! Polynomial drift regressors.

use nalgebra::DMatrix;

use crate::linalg::orthonormalize;

/// Drift degree for a session: `⌊duration / 120 s⌋ + 1`, capped at 4.
pub fn drift_degree(duration_s: f64) -> usize {
    ((duration_s / 120.0).floor() as usize + 1).min(4)
}

/// Legendre polynomials of degree `0..=degree` sampled on `[-1, 1]` at `t`
/// points, then orthonormalized so the sampled columns are exactly
/// orthogonal. The span equals that of the sampled polynomials.
pub fn legendre_basis(t: usize, degree: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(t, degree + 1);
    for i in 0..t {
        let x = if t > 1 { -1.0 + 2.0 * i as f64 / (t - 1) as f64 } else { 0.0 };
        let (mut p0, mut p1) = (1.0, x);
        m[(i, 0)] = 1.0;
        if degree >= 1 {
            m[(i, 1)] = x;
        }
        for n in 2..=degree {
            let p2 = ((2 * n - 1) as f64 * x * p1 - (n - 1) as f64 * p0) / n as f64;
            m[(i, n)] = p2;
            p0 = p1;
            p1 = p2;
        }
    }
    orthonormalize(&m)
}
