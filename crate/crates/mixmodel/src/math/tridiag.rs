//! Thomas algorithm for tridiagonal systems.

use crate::error::{ModelError, Result};

/// Solve a tridiagonal system in place. `lower` has length n-1 (subdiagonal),
/// `diag` length n, `upper` length n-1, `rhs` length n. Plain elimination
/// without pivoting: callers must supply diagonally dominant systems (the
/// Crank-Nicolson matrices here are).
pub fn solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    if n == 0 || lower.len() != n - 1 || upper.len() != n - 1 || rhs.len() != n {
        return Err(ModelError::InvalidInput("tridiagonal dimensions mismatch".into()));
    }
    let mut c_star = vec![0.0; n - 1];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(ModelError::Numerical("tridiagonal pivot is zero".into()));
    }
    rhs[0] /= denom;
    for i in 1..n {
        c_star[i - 1] = upper[i - 1] / denom;
        denom = diag[i] - lower[i - 1] * c_star[i - 1];
        if denom == 0.0 {
            return Err(ModelError::Numerical("tridiagonal pivot is zero".into()));
        }
        rhs[i] = (rhs[i] - lower[i - 1] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c_star[i] * rhs[i + 1];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solves_known_system() {
        // A = [[2,1,0],[1,3,1],[0,1,2]], x = [1,2,3] -> b = [4, 10, 8]
        let mut b = vec![4.0, 10.0, 8.0];
        solve(&[1.0, 1.0], &[2.0, 3.0, 2.0], &[1.0, 1.0], &mut b).unwrap();
        assert_relative_eq!(b[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(b[1], 2.0, max_relative = 1e-14);
        assert_relative_eq!(b[2], 3.0, max_relative = 1e-14);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut b = vec![1.0, 2.0];
        assert!(solve(&[1.0, 2.0], &[1.0, 1.0], &[1.0], &mut b).is_err());
    }
}
