//! Singular values by one-sided (Hestenes) Jacobi rotation.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;

/// Singular values of `z` in descending order, `min(rows, cols)` of them.
///
/// Columns are orthogonalised pairwise until every pair is orthogonal to
/// working precision; the singular values are then the column norms.
pub fn singular_values(z: &Matrix) -> Result<Vec<f64>> {
    if !z.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    // Rotate over the shorter dimension.
    let work = if z.cols() > z.rows() { z.transpose() } else { z.clone() };
    let (m, n) = (work.rows(), work.cols());
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| work.get(r, c)).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || libm::fabs(gamma) <= f64::EPSILON * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|c| libm::sqrt(c.iter().map(|v| v * v).sum::<f64>()))
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn diagonal_padded() {
        let z = Matrix::from_vec(3, 2, vec![3.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = singular_values(&z).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let s = singular_values(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    #[test]
    fn wide_matrix_uses_transpose() {
        let z = Matrix::from_vec(1, 3, vec![3.0, 4.0, 0.0]).unwrap();
        let s = singular_values(&z).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_nan() {
        let z = Matrix::from_vec(1, 2, vec![f64::NAN, 1.0]).unwrap();
        assert_eq!(singular_values(&z), Err(Error::NonFiniteInput));
    }
}
