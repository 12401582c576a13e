use nalgebra::DMatrix;

use super::eigen::{eigendecompose_clamped, DEFAULT_RANK_TOL};
use super::measure::GaussianMeasure;
use crate::error::{CanError, Result};

/// Values below this (negative) are taken as evidence that the supports of
/// the two covariances are not comparable.
const NEGATIVE_KL_TOL: f64 = 1e-9;

/// Rank-aware divergence between the abstraction of `chi_i` through `v_abs`
/// (`d_j × d_i`) and `chi_j`:
///
/// `Tr((V Σ_i Vᵀ)^† Σ_j) + log gdet(V Σ_i Vᵀ) − log gdet(Σ_j) − r_j`
///
/// where `†` and `gdet` act on the nonzero part of the spectrum.
pub fn kl_gaussian_abstracted(
    v_abs: &DMatrix<f64>,
    chi_i: &GaussianMeasure,
    chi_j: &GaussianMeasure,
) -> Result<f64> {
    let (value, trace) = raw_divergence(v_abs, chi_i, chi_j)?;
    if value < -NEGATIVE_KL_TOL * (1.0 + trace.abs()) {
        return Err(CanError::SupportMismatch(format!(
            "divergence evaluates to {value:e}; supports are not aligned"
        )));
    }
    Ok(value.max(0.0))
}

/// Like [`kl_gaussian_abstracted`] but tolerant of slightly tilted supports.
///
/// When the two rank-`r_j` supports are not exactly aligned the formula can
/// dip below zero by roughly the squared principal angle between them. The
/// magnitude of the raw value is returned, so approximate solutions are
/// scored by how far they are from an exact abstraction.
pub fn abstraction_discrepancy(
    v_abs: &DMatrix<f64>,
    chi_i: &GaussianMeasure,
    chi_j: &GaussianMeasure,
) -> Result<f64> {
    raw_divergence(v_abs, chi_i, chi_j).map(|(value, _)| value.abs())
}

fn raw_divergence(
    v_abs: &DMatrix<f64>,
    chi_i: &GaussianMeasure,
    chi_j: &GaussianMeasure,
) -> Result<(f64, f64)> {
    if v_abs.ncols() != chi_i.dim() {
        return Err(CanError::DimensionMismatch {
            expected: chi_i.dim(),
            got: v_abs.ncols(),
            context: "abstraction map columns vs fine measure dimension",
        });
    }
    if v_abs.nrows() != chi_j.dim() {
        return Err(CanError::DimensionMismatch {
            expected: chi_j.dim(),
            got: v_abs.nrows(),
            context: "abstraction map rows vs coarse measure dimension",
        });
    }
    let pushed = v_abs * chi_i.cov() * v_abs.transpose();
    let pushed = (&pushed + pushed.transpose()) * 0.5;
    let pe = eigendecompose_clamped(&pushed, DEFAULT_RANK_TOL, f64::INFINITY)?;
    let je = chi_j.eig();
    if pe.rank != je.rank {
        return Err(CanError::SupportMismatch(format!(
            "abstracted covariance has rank {}, coarse covariance has rank {}",
            pe.rank, je.rank
        )));
    }
    let trace = (pe.pseudo_inverse() * chi_j.cov()).trace();
    let value = trace + pe.log_pseudo_det() - je.log_pseudo_det() - je.rank as f64;
    if !value.is_finite() {
        return Err(CanError::SupportMismatch(format!(
            "divergence evaluates to {value}"
        )));
    }
    Ok((value, trace))
}
