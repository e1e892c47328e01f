//! Induced 2-norm by power iteration on `AᵀA`.

use crate::error::{Error, Result};
use crate::tensor::{check_finite, dot, norm2, Matrix};

pub const MAX_POWER_ITERATIONS: usize = 10_000;

/// Largest singular value of `a`, within `tol` relative.
///
/// Power iteration on `AᵀA` from the normalized all-ones vector. Stops when
/// the Rayleigh-quotient residual `‖Mv − μv‖` falls below `tol · μ`, which
/// places `μ` within `tol` of an eigenvalue of `AᵀA`.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    check_finite("matrix", a.as_slice())?;
    let n = a.cols();
    if n == 0 || a.rows() == 0 || a.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }

    let gram = |v: &[f64]| a.matvec_t(&a.matvec(v));

    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut mv = gram(&v);
    // All-ones can sit in the null space of AᵀA; restart from the heaviest column.
    if norm2(&mv) <= f64::EPSILON * a.frobenius().powi(2) {
        let heaviest = (0..n)
            .max_by(|&i, &j| {
                let ci: f64 = (0..a.rows()).map(|r| a[(r, i)].powi(2)).sum();
                let cj: f64 = (0..a.rows()).map(|r| a[(r, j)].powi(2)).sum();
                ci.total_cmp(&cj).then(j.cmp(&i))
            })
            .unwrap_or(0);
        v = vec![0.0; n];
        v[heaviest] = 1.0;
        mv = gram(&v);
    }

    let mut mu = dot(&v, &mv);
    for _ in 0..MAX_POWER_ITERATIONS {
        let residual: f64 = mv.iter().zip(&v).map(|(m, x)| (m - mu * x).powi(2)).sum::<f64>().sqrt();
        if residual <= tol * mu.abs() {
            return Ok(mu.max(0.0).sqrt());
        }
        let len = norm2(&mv);
        if len == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().zip(&mv).for_each(|(x, m)| *x = m / len);
        mv = gram(&v);
        mu = dot(&v, &mv);
    }
    Err(Error::Convergence {
        iterations: MAX_POWER_ITERATIONS,
        estimate: mu.max(0.0).sqrt(),
    })
}
