use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::abstraction::StructureMatrix;
use crate::error::{CanError, Result};

/// Default Frobenius tolerance on `‖VᵀV − I‖_F`.
pub const STIEFEL_TOL: f64 = 1e-8;

/// Singular values below this fraction of the largest are treated as zero by [`polar_prox`].
const POLAR_RANK_TOL: f64 = 1e-12;

/// Smallest `λ_min / λ_max` of `SᵀS` for which the polar factor is taken
/// from the Gram eigendecomposition instead of the SVD (condition of `S`
/// below 100, so orthogonality is kept to about `1e-12`).
const GRAM_COND_MIN: f64 = 1e-4;

/// `‖VᵀV − I‖_F`.
pub fn stiefel_deviation(v: &DMatrix<f64>) -> f64 {
    let g = v.transpose() * v;
    (g - DMatrix::identity(v.ncols(), v.ncols())).norm()
}

/// A tall matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelMatrix(DMatrix<f64>);

impl StiefelMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_tol(m, STIEFEL_TOL)
    }

    pub fn with_tol(m: DMatrix<f64>, tol: f64) -> Result<Self> {
        if m.nrows() < m.ncols() {
            return Err(CanError::Orientation {
                low: m.nrows(),
                high: m.ncols(),
            });
        }
        let dev = stiefel_deviation(&m);
        if dev > tol {
            return Err(CanError::Validation(format!(
                "matrix is not on the Stiefel manifold: |VᵀV - I|_F = {dev:e}"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

impl AsRef<DMatrix<f64>> for StiefelMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Result of [`polar_prox`]. `unique` is false when the argument was rank
/// deficient and the null directions were completed arbitrarily.
#[derive(Debug, Clone)]
pub struct PolarFactor {
    pub factor: StiefelMatrix,
    pub unique: bool,
}

/// Projection onto the Stiefel manifold: the orthogonal factor `U Qᵀ` of the
/// thin SVD `S = U Σ Qᵀ`, equivalently `S (SᵀS)^{-1/2}`.
pub fn polar_prox(s: &DMatrix<f64>) -> Result<PolarFactor> {
    let (rows, cols) = s.shape();
    if rows < cols {
        return Err(CanError::Orientation {
            low: rows,
            high: cols,
        });
    }
    if cols == 0 {
        return Ok(PolarFactor {
            factor: StiefelMatrix(DMatrix::zeros(rows, 0)),
            unique: true,
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(CanError::Validation(
            "polar argument has non-finite entries".into(),
        ));
    }
    if let Some(q) = polar_by_gram(s) {
        return Ok(PolarFactor {
            factor: StiefelMatrix(q),
            unique: true,
        });
    }
    let svd = s.clone().svd(true, true);
    let mut u = svd.u.expect("u requested");
    let q_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let deficient: Vec<usize> = (0..cols)
        .filter(|&k| !(svd.singular_values[k] > POLAR_RANK_TOL * smax) || smax == 0.0)
        .collect();
    let unique = deficient.is_empty();
    if !unique {
        complete_orthonormal(&mut u, &deficient);
    }
    Ok(PolarFactor {
        factor: StiefelMatrix(u * q_t),
        unique,
    })
}

/// `S (SᵀS)^{-1/2}` when `SᵀS` is well conditioned.
fn polar_by_gram(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = s.tr_mul(s).symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(eig.eigenvalues.min() > GRAM_COND_MIN * max) {
        return None;
    }
    let mut w = eig.eigenvectors.clone();
    for (mut col, &mu) in w.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col /= mu.sqrt();
    }
    Some(s * (w * eig.eigenvectors.transpose()))
}

/// Replaces the listed columns of `u` with an orthonormal completion of the
/// remaining ones, taken deterministically from the canonical basis.
fn complete_orthonormal(u: &mut DMatrix<f64>, replace: &[usize]) {
    let (rows, cols) = u.shape();
    let mut basis: Vec<DVector<f64>> = (0..cols)
        .filter(|k| !replace.contains(k))
        .map(|k| u.column(k).into_owned())
        .collect();
    let mut candidate = 0;
    for &k in replace {
        loop {
            let mut e = DVector::zeros(rows);
            e[candidate % rows] = 1.0;
            candidate += 1;
            for b in &basis {
                let p = b.dot(&e);
                e -= b * p;
            }
            for b in &basis {
                let p = b.dot(&e);
                e -= b * p;
            }
            let n = e.norm();
            if n > 1e-6 {
                e /= n;
                u.set_column(k, &e);
                basis.push(e);
                break;
            }
        }
    }
}

/// Samples a Stiefel matrix whose support is contained in `mask`.
///
/// Entries are standard normal; with a mask, off-support entries are zeroed
/// and each column is normalized (columns of a structure matrix have disjoint
/// supports, so this is exactly orthonormal). Without a mask the columns are
/// orthonormalized by Gram–Schmidt.
pub fn random_stiefel<R: Rng + ?Sized>(
    d_i: usize,
    d_j: usize,
    mask: Option<&StructureMatrix>,
    rng: &mut R,
) -> Result<StiefelMatrix> {
    if d_i < d_j {
        return Err(CanError::Orientation {
            low: d_i,
            high: d_j,
        });
    }
    let mut m = DMatrix::<f64>::zeros(d_i, d_j);
    for c in 0..d_j {
        for r in 0..d_i {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    match mask {
        Some(mask) => {
            if mask.shape() != (d_i, d_j) {
                return Err(CanError::Validation(format!(
                    "mask shape {:?} does not match ({d_i}, {d_j})",
                    mask.shape()
                )));
            }
            m.component_mul_assign(mask.as_matrix());
            for (c, mut col) in m.column_iter_mut().enumerate() {
                let n = col.norm();
                if n == 0.0 {
                    return Err(CanError::InfeasibleMask(c));
                }
                col /= n;
            }
        }
        None => {
            for c in 0..d_j {
                for _ in 0..2 {
                    for p in 0..c {
                        let proj = m.column(p).dot(&m.column(c));
                        let prev = m.column(p).into_owned();
                        let mut col = m.column_mut(c);
                        col.axpy(-proj, &prev, 1.0);
                    }
                }
                let n = m.column(c).norm();
                m.column_mut(c).unscale_mut(n);
            }
        }
    }
    Ok(StiefelMatrix(m))
}

/// Seeded convenience wrapper around [`random_stiefel`].
pub fn random_stiefel_seeded(
    d_i: usize,
    d_j: usize,
    mask: Option<&StructureMatrix>,
    seed: u64,
) -> Result<StiefelMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_stiefel(d_i, d_j, mask, &mut rng)
}
