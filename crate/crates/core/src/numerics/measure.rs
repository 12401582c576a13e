use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::eigen::{check_symmetric, symmetrize, EigenDecomposition, DEFAULT_RANK_TOL};
use crate::error::{CanError, Result};

/// Eigenvalues below `-PSD_TOL * lambda_max` make a covariance invalid.
pub const PSD_TOL: f64 = 1e-8;

/// Zero-mean Gaussian measure given by its covariance.
///
/// The eigendecomposition is computed at most once and cached.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    cov: DMatrix<f64>,
    eig: OnceLock<EigenDecomposition>,
}

impl PartialEq for GaussianMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.cov == other.cov
    }
}

impl GaussianMeasure {
    /// Validating constructor: the covariance must be symmetric and PSD.
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&cov)?;
        if cov.nrows() == 0 {
            return Err(CanError::Validation(
                "covariance must be at least 1x1".into(),
            ));
        }
        let cov = symmetrize(&cov);
        let eig = super::eigen::eigendecompose_clamped(&cov, DEFAULT_RANK_TOL, PSD_TOL)?;
        let cell = OnceLock::new();
        let _ = cell.set(eig);
        Ok(Self { cov, eig: cell })
    }

    /// Builds a measure from a covariance that is PSD by construction
    /// (for example a pushforward); only symmetrizes.
    pub fn from_psd(cov: DMatrix<f64>) -> Self {
        Self {
            cov: symmetrize(&cov),
            eig: OnceLock::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_psd(DMatrix::identity(dim, dim))
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(
            values,
        )))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn eig(&self) -> &EigenDecomposition {
        self.eig.get_or_init(|| {
            super::eigen::eigendecompose_clamped(&self.cov, DEFAULT_RANK_TOL, f64::INFINITY)
                .expect("symmetric input always decomposes when clamping is unbounded")
        })
    }

    pub fn rank(&self) -> usize {
        self.eig().rank
    }

    /// Eigenvalues in ascending order.
    pub fn ascending_spectrum(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.eig().eigenvalues.iter().copied().collect();
        v.reverse();
        v
    }

    /// Returns the same measure with its covariance scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_psd(&self.cov * factor)
    }
}

/// `φ^M_#(μ)`: covariance `M Σ Mᵀ`.
pub fn pushforward_gaussian(map: &DMatrix<f64>, mu: &GaussianMeasure) -> Result<GaussianMeasure> {
    if map.ncols() != mu.dim() {
        return Err(CanError::DimensionMismatch {
            expected: mu.dim(),
            got: map.ncols(),
            context: "pushforward map columns vs measure dimension",
        });
    }
    let cov = map * mu.cov() * map.transpose();
    Ok(GaussianMeasure::from_psd(cov))
}

/// Bookkeeping thresholds applied when mixtures are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureOptions {
    /// Components whose weight falls below this value are dropped.
    /// The default of `0.0` drops only components of exactly zero weight.
    pub weight_prune_tol: f64,
    /// Components whose covariances are closer than this (Frobenius) are merged.
    pub merge_tol: f64,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            weight_prune_tol: 0.0,
            merge_tol: 1e-9,
        }
    }
}

impl MixtureOptions {
    /// Pruning enabled, for long diffusion runs.
    pub fn pruning() -> Self {
        Self {
            weight_prune_tol: 1e-12,
            ..Self::default()
        }
    }
}

/// Finite convex combination of zero-mean Gaussians of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMeasure {
    components: Vec<(f64, GaussianMeasure)>,
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl MixtureMeasure {
    pub fn new(components: Vec<(f64, GaussianMeasure)>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(CanError::Validation(
                "mixture needs at least one component".into(),
            ));
        };
        let dim = first.1.dim();
        for (k, (w, g)) in components.iter().enumerate() {
            if g.dim() != dim {
                return Err(CanError::DimensionMismatch {
                    expected: dim,
                    got: g.dim(),
                    context: "mixture component dimension",
                });
            }
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(CanError::Validation(format!(
                    "mixture weight {k} = {w} outside (0, 1]"
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL * components.len() as f64 {
            return Err(CanError::Validation(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn single(g: GaussianMeasure) -> Self {
        Self {
            components: vec![(1.0, g)],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[(f64, GaussianMeasure)] {
        &self.components
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.0).sum()
    }

    /// The only component, when the mixture is a plain Gaussian.
    pub fn as_gaussian(&self) -> Option<&GaussianMeasure> {
        match self.components.as_slice() {
            [(_, g)] => Some(g),
            _ => None,
        }
    }

    /// Covariance of the mixture as a whole, `Σ_k w_k Σ_k`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.components
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, (w, g)| acc + g.cov() * *w)
    }

    /// Merges identical components and orders them deterministically:
    /// descending weight, then descending trace, then lexicographic entries.
    pub fn canonical(&self, merge_tol: f64) -> Self {
        let mut merged = merge_components(self.components.clone(), merge_tol);
        merged.sort_by(|a, b| compare_components(a, b));
        Self { components: merged }
    }
}

fn compare_components(
    a: &(f64, GaussianMeasure),
    b: &(f64, GaussianMeasure),
) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let by_weight = b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal);
    if by_weight != Ordering::Equal {
        return by_weight;
    }
    let by_trace =
        b.1.cov()
            .trace()
            .partial_cmp(&a.1.cov().trace())
            .unwrap_or(Ordering::Equal);
    if by_trace != Ordering::Equal {
        return by_trace;
    }
    for (x, y) in a.1.cov().iter().zip(b.1.cov().iter()) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

fn merge_components(
    components: Vec<(f64, GaussianMeasure)>,
    merge_tol: f64,
) -> Vec<(f64, GaussianMeasure)> {
    let mut out: Vec<(f64, GaussianMeasure)> = Vec::with_capacity(components.len());
    for (w, g) in components {
        match out
            .iter_mut()
            .find(|(_, h)| (h.cov() - g.cov()).norm() < merge_tol)
        {
            Some(slot) => slot.0 += w,
            None => out.push((w, g)),
        }
    }
    out
}

/// Pushes every component through `map`; weights are unchanged.
pub fn pushforward_mixture(map: &DMatrix<f64>, mix: &MixtureMeasure) -> Result<MixtureMeasure> {
    let components = mix
        .components
        .iter()
        .map(|(w, g)| pushforward_gaussian(map, g).map(|p| (*w, p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureMeasure { components })
}

/// n-ary convex combination `Σ_k λ_k χ_k` of mixtures of equal dimension.
pub fn combine(
    weights: &[f64],
    parts: &[&MixtureMeasure],
    opts: &MixtureOptions,
) -> Result<MixtureMeasure> {
    if weights.len() != parts.len() || parts.is_empty() {
        return Err(CanError::Validation(format!(
            "combination needs matching nonempty weights and parts ({} vs {})",
            weights.len(),
            parts.len()
        )));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(CanError::Validation(
            "combination weight outside [0, 1]".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL * weights.len() as f64 {
        return Err(CanError::Validation(format!(
            "combination weights sum to {total}, expected 1"
        )));
    }
    let dim = parts[0].dim();
    let mut raw = Vec::new();
    for (lam, mix) in weights.iter().zip(parts) {
        if mix.dim() != dim {
            return Err(CanError::DimensionMismatch {
                expected: dim,
                got: mix.dim(),
                context: "convex combination of mixtures",
            });
        }
        for (w, g) in &mix.components {
            let scaled = lam * w;
            if scaled > 0.0 && scaled >= opts.weight_prune_tol {
                raw.push((scaled, g.clone()));
            }
        }
    }
    let kept: f64 = raw.iter().map(|c| c.0).sum();
    if raw.is_empty() || kept <= 0.0 {
        return Err(CanError::Validation(
            "all mixture components were pruned".into(),
        ));
    }
    for c in &mut raw {
        c.0 /= kept;
    }
    Ok(MixtureMeasure {
        components: merge_components(raw, opts.merge_tol),
    })
}

/// `cc_λ(a, b) = λ a + (1 − λ) b`.
pub fn convex_combine(
    lambda: f64,
    a: &MixtureMeasure,
    b: &MixtureMeasure,
    opts: &MixtureOptions,
) -> Result<MixtureMeasure> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CanError::Validation(format!(
            "lambda = {lambda} outside [0, 1]"
        )));
    }
    combine(&[lambda, 1.0 - lambda], &[a, b], opts)
}

/// Distance between two mixtures after merging and canonical ordering.
///
/// Components are matched greedily by covariance distance; the result is the
/// largest of the matched covariance Frobenius distances and weight gaps.
/// Mixtures with different numbers of distinct components are infinitely far apart.
pub fn mixture_distance(a: &MixtureMeasure, b: &MixtureMeasure, merge_tol: f64) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    let ca = a.canonical(merge_tol);
    let cb = b.canonical(merge_tol);
    if ca.len() != cb.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; cb.len()];
    let mut worst: f64 = 0.0;
    for (wa, ga) in ca.components() {
        let (best, dist) = cb
            .components()
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, (_, gb))| (k, (ga.cov() - gb.cov()).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, x| {
                if x.1 < acc.1 {
                    x
                } else {
                    acc
                }
            });
        if best == usize::MAX {
            return f64::INFINITY;
        }
        used[best] = true;
        worst = worst.max(dist).max((wa - cb.components()[best].0).abs());
    }
    worst
}
