use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CanError, Result};

/// Default relative threshold below which an eigenvalue does not count towards the rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Relative asymmetry accepted by [`check_symmetric`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Rank-aware eigendecomposition of a symmetric positive-semidefinite matrix.
///
/// Eigenvalues are stored in descending order; eigenvector `k` is column `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub rank: usize,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Largest eigenvalue (zero for an empty or zero matrix).
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    /// `U Λ Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        let scaled = u * DMatrix::from_diagonal(&self.eigenvalues);
        let out = scaled * u.transpose();
        symmetrize(&out)
    }

    /// Eigenvectors spanning the support, `U_{+}` (d × rank).
    pub fn support_vectors(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.rank).into_owned()
    }

    /// Nonzero eigenvalues, `Λ_{+}` (descending).
    pub fn support_values(&self) -> DVector<f64> {
        self.eigenvalues.rows(0, self.rank).into_owned()
    }

    /// `U_{+} Λ_{+}^{p}` for a real power `p`; `p = 0.5` gives a square-root factor.
    pub fn scaled_support(&self, power: f64) -> DMatrix<f64> {
        let mut f = self.support_vectors();
        for (k, mut col) in f.column_iter_mut().enumerate() {
            col *= self.eigenvalues[k].powf(power);
        }
        f
    }

    /// Moore–Penrose pseudo-inverse restricted to the rank-`r` support.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let f = self.scaled_support(-0.5);
        symmetrize(&(&f * f.transpose()))
    }

    /// Logarithm of the pseudo-determinant (product of the nonzero eigenvalues).
    pub fn log_pseudo_det(&self) -> f64 {
        self.eigenvalues
            .iter()
            .take(self.rank)
            .map(|l| l.ln())
            .sum()
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rejects non-square matrices and matrices whose asymmetry exceeds
/// [`SYMMETRY_TOL`] relative to the largest entry.
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(CanError::Validation(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CanError::Validation("matrix has non-finite entries".into()));
    }
    let scale = m.amax();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(CanError::Validation(format!(
                    "matrix is not symmetric: |m[{i},{j}] - m[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Symmetric eigendecomposition with descending ordering, clamping of small
/// negative eigenvalues and a relative rank threshold.
///
/// Ties in the ordering are broken by ascending original index, so repeated
/// calls on the same input are deterministic.
pub fn eigendecompose(cov: &DMatrix<f64>, rank_tol: f64) -> Result<EigenDecomposition> {
    eigendecompose_clamped(cov, rank_tol, rank_tol)
}

/// As [`eigendecompose`], with a separate relative threshold `neg_tol` below
/// which negative eigenvalues are an error rather than clamped.
pub fn eigendecompose_clamped(
    cov: &DMatrix<f64>,
    rank_tol: f64,
    neg_tol: f64,
) -> Result<EigenDecomposition> {
    check_symmetric(cov)?;
    let n = cov.nrows();
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
            rank: 0,
        });
    }
    let eig = SymmetricEigen::new(symmetrize(cov));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = rank_tol * scale;
    let neg_floor = neg_tol * scale;
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &src) in order.iter().enumerate() {
        let mut lam = eig.eigenvalues[src];
        if lam < -neg_floor {
            return Err(CanError::Indefinite {
                eigenvalue: lam,
                tol: neg_tol,
            });
        }
        if lam < 0.0 {
            lam = 0.0;
        }
        if scale > 0.0 && lam > floor {
            rank += 1;
        }
        values[k] = lam;
        vectors.set_column(k, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomposition {
        eigenvalues: values,
        eigenvectors: vectors,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_full_rank() {
        let e = eigendecompose(&DMatrix::identity(3, 3), 1e-9).unwrap();
        assert_eq!(e.rank, 3);
        assert!(e.eigenvalues.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn diagonal_rank_deficient() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let e = eigendecompose(&m, 1e-9).unwrap();
        assert_eq!(e.rank, 1);
        assert!((e.eigenvalues[0] - 2.0).abs() < 1e-14);
        assert_eq!(e.eigenvalues[1], 0.0);
    }

    /// Rank by Gaussian elimination with partial pivoting, used as an
    /// independent oracle for the eigenvalue-based rank.
    fn row_reduce_rank(m: &DMatrix<f64>, tol: f64) -> usize {
        let mut a = m.clone();
        let (rows, cols) = a.shape();
        let mut rank = 0;
        for c in 0..cols {
            if rank == rows {
                break;
            }
            let (piv, val) = (rank..rows)
                .map(|r| (r, a[(r, c)].abs()))
                .fold((rank, -1.0), |best, x| if x.1 > best.1 { x } else { best });
            if val <= tol {
                continue;
            }
            a.swap_rows(rank, piv);
            for r in (rank + 1)..rows {
                let f = a[(r, c)] / a[(rank, c)];
                for k in c..cols {
                    a[(r, k)] -= f * a[(rank, k)];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn gram_of_full_column_rank_factor() {
        // A is 3x2 with independent columns; A Aᵀ has rank 2.
        let a = DMatrix::from_row_slice(3, 2, &[0.3, -1.2, 1.7, 0.4, -0.5, 2.2]);
        let gram = &a * a.transpose();
        let e = eigendecompose(&gram, 1e-9).unwrap();
        assert_eq!(row_reduce_rank(&a, 1e-12), 2);
        assert_eq!(e.rank, row_reduce_rank(&a, 1e-12));
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            eigendecompose(&DMatrix::zeros(2, 3), 1e-9),
            Err(CanError::Validation(_))
        ));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            eigendecompose(&m, 1e-9),
            Err(CanError::Validation(_))
        ));
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(
            eigendecompose(&m, 1e-9),
            Err(CanError::Indefinite { .. })
        ));
    }

    #[test]
    fn tiny_negative_is_clamped() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        let e = eigendecompose(&m, 1e-9).unwrap();
        assert_eq!(e.eigenvalues[1], 0.0);
        assert_eq!(e.rank, 1);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let a = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let cov = &a * a.transpose();
        let e = eigendecompose(&cov, 1e-9).unwrap();
        let utu = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((utu - DMatrix::identity(4, 4)).norm() < 1e-9);
        assert!((e.reconstruct() - &cov).norm() <= 1e-8 * cov.norm());
        for k in 1..4 {
            assert!(e.eigenvalues[k - 1] >= e.eigenvalues[k]);
        }
    }

    #[test]
    fn pseudo_inverse_of_singular_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0, 2.0]));
        let e = eigendecompose(&m, 1e-9).unwrap();
        let p = e.pseudo_inverse();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.0, 0.5]));
        assert!((p - expect).norm() < 1e-14);
        assert!((e.log_pseudo_det() - 8.0_f64.ln()).abs() < 1e-14);
    }
}
