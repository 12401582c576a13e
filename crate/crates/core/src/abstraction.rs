//! Constructive linear causal abstractions (CLCAs): representation, validity,
//! composition, the spectral existence test, and the local recovery metrics.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CanError, Result};
use crate::numerics::{stiefel_deviation, GaussianMeasure, StiefelMatrix, STIEFEL_TOL};

/// A learned entry with magnitude above this value counts as structurally present.
pub const SUPPORT_TOL: f64 = 1e-6;

/// Off-mask entries larger than this make a CLCA invalid.
pub const MASK_TOL: f64 = 1e-12;

/// Default relative slack of the interlacing test (times the largest eigenvalue).
pub const INTERLACING_SLACK: f64 = 1e-8;

/// Binary `d_i × d_j` matrix assigning each low-level variable (row) to one
/// high-level variable (column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMatrix {
    mask: DMatrix<f64>,
}

impl StructureMatrix {
    /// Validating constructor.
    pub fn try_new(mask: DMatrix<f64>) -> Result<Self> {
        let s = Self::from_raw(mask)?;
        let problems = s.violations();
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(CanError::Validation(problems.join("; ")))
        }
    }

    /// Accepts any binary matrix; structural violations are reported by
    /// [`StructureMatrix::violations`] and [`validate_clca`].
    pub fn from_raw(mask: DMatrix<f64>) -> Result<Self> {
        if let Some(v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(CanError::Validation(format!(
                "structure entry {v} is not binary"
            )));
        }
        Ok(Self { mask })
    }

    /// Builds the structure from a row → column assignment.
    pub fn from_assignment(cols: usize, assignment: &[usize]) -> Result<Self> {
        let mut mask = DMatrix::zeros(assignment.len(), cols);
        for (r, &c) in assignment.iter().enumerate() {
            if c >= cols {
                return Err(CanError::Validation(format!(
                    "row {r} assigned to column {c} >= {cols}"
                )));
            }
            mask[(r, c)] = 1.0;
        }
        Self::try_new(mask)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mask: DMatrix::identity(n, n),
        }
    }

    /// Uniformly random surjective assignment of `d_i` rows onto `d_j` columns.
    ///
    /// Same distribution as drawing each row's column uniformly and redrawing
    /// until every column is hit, but sampled row by row from exact
    /// completion counts so that near-square shapes stay cheap.
    pub fn random<R: Rng + ?Sized>(d_i: usize, d_j: usize, rng: &mut R) -> Result<Self> {
        if d_j == 0 || d_i < d_j {
            return Err(CanError::Orientation {
                low: d_i,
                high: d_j,
            });
        }
        if d_i > 24 {
            return Self::random_by_rejection(d_i, d_j, rng);
        }
        let mut hit = vec![false; d_j];
        let mut unhit = d_j;
        let mut assignment = Vec::with_capacity(d_i);
        for r in 0..d_i {
            let rest = (d_i - r - 1) as u32;
            let stay = completions(d_j, unhit, rest);
            let fresh = if unhit > 0 {
                completions(d_j, unhit - 1, rest)
            } else {
                0
            };
            let covered = (d_j - unhit) as u128;
            let total = covered * stay + unhit as u128 * fresh;
            let mut x = rng.random_range(0..total);
            let col = if x < covered * stay {
                let k = (x / stay) as usize;
                (0..d_j).filter(|&c| hit[c]).nth(k).expect("k < covered")
            } else {
                x -= covered * stay;
                let k = (x / fresh) as usize;
                (0..d_j).filter(|&c| !hit[c]).nth(k).expect("k < unhit")
            };
            if !hit[col] {
                hit[col] = true;
                unhit -= 1;
            }
            assignment.push(col);
        }
        Self::from_assignment(d_j, &assignment)
    }

    fn random_by_rejection<R: Rng + ?Sized>(d_i: usize, d_j: usize, rng: &mut R) -> Result<Self> {
        loop {
            let assignment: Vec<usize> = (0..d_i).map(|_| rng.random_range(0..d_j)).collect();
            let mut hit = vec![false; d_j];
            for &c in &assignment {
                hit[c] = true;
            }
            if hit.iter().all(|&h| h) {
                return Self::from_assignment(d_j, &assignment);
            }
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mask
    }

    /// Column index of the block each row belongs to (first one if several).
    pub fn assignment(&self) -> Vec<Option<usize>> {
        self.mask
            .row_iter()
            .map(|row| row.iter().position(|&v| v == 1.0))
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1.0).count()
    }

    /// Human-readable list of violated structural constraints.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (r, c) = self.shape();
        if r < c {
            out.push(format!("orientation: {r} rows < {c} columns"));
        }
        for (i, row) in self.mask.row_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 {
                out.push(format!("row {i} has {ones} ones, expected exactly 1"));
            }
        }
        for (j, col) in self.mask.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                out.push(format!("column {j} is empty (non-surjective)"));
            }
        }
        out
    }
}

/// Number of maps from `m` rows into `cols` columns that hit `u` given columns.
fn completions(cols: usize, u: usize, m: u32) -> u128 {
    let mut total: i128 = 0;
    let mut binom: i128 = 1;
    for i in 0..=u {
        let term = binom * ((cols - i) as i128).pow(m);
        total += if i % 2 == 0 { term } else { -term };
        binom = binom * (u - i) as i128 / (i + 1) as i128;
    }
    total as u128
}

/// CLCA between a fine node (rows, `d_i`) and a coarse node (columns, `d_j`).
///
/// `weights` is the embedding `V`; the abstraction is `Vᵀ`. Weights are kept as
/// a plain matrix so that invalid maps can be represented and reported.
#[derive(Debug, Clone, PartialEq)]
pub struct Clca {
    pub structure: StructureMatrix,
    pub weights: DMatrix<f64>,
}

impl Clca {
    /// Validating constructor.
    pub fn new(structure: StructureMatrix, weights: DMatrix<f64>) -> Result<Self> {
        let c = Self::new_unchecked(structure, weights);
        let report = validate_clca(&c);
        if report.is_valid() {
            Ok(c)
        } else {
            Err(CanError::Validation(report.problems.join("; ")))
        }
    }

    pub fn new_unchecked(structure: StructureMatrix, weights: DMatrix<f64>) -> Self {
        Self { structure, weights }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            structure: StructureMatrix::identity(n),
            weights: DMatrix::identity(n, n),
        }
    }

    pub fn from_stiefel(structure: StructureMatrix, v: StiefelMatrix) -> Result<Self> {
        Self::new(structure, v.into_inner())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    /// The abstraction map `Vᵀ` (`d_j × d_i`).
    pub fn abstraction(&self) -> DMatrix<f64> {
        self.weights.transpose()
    }

    /// `B ⊙ V`.
    pub fn masked_weights(&self) -> DMatrix<f64> {
        self.weights.component_mul(self.structure.as_matrix())
    }
}

/// Outcome of [`validate_clca`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    /// Largest magnitude of a weight outside the structure support.
    pub support_violation: f64,
    /// `‖VᵀV − I‖_F`.
    pub stiefel_deviation: f64,
    pub problems: Vec<String>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty()
    }
}

pub fn validate_clca(c: &Clca) -> ValidityReport {
    let mut problems = c.structure.violations();
    if c.structure.shape() != c.weights.shape() {
        problems.push(format!(
            "shape: structure {:?} vs weights {:?}",
            c.structure.shape(),
            c.weights.shape()
        ));
        return ValidityReport {
            support_violation: f64::NAN,
            stiefel_deviation: f64::NAN,
            problems,
        };
    }
    let support_violation = c
        .weights
        .iter()
        .zip(c.structure.as_matrix().iter())
        .filter(|(_, &m)| m == 0.0)
        .map(|(w, _)| w.abs())
        .fold(0.0, f64::max);
    if support_violation > MASK_TOL {
        problems.push(format!(
            "support: off-mask weight of magnitude {support_violation:e}"
        ));
    }
    let dev = stiefel_deviation(&c.weights);
    if dev > STIEFEL_TOL {
        problems.push(format!("stiefel: |VᵀV - I|_F = {dev:e}"));
    }
    ValidityReport {
        support_violation,
        stiefel_deviation: dev,
        problems,
    }
}

/// Composes `inner` (i → j) with `outer` (j → k) into a CLCA from i to k.
pub fn compose_clca(inner: &Clca, outer: &Clca) -> Result<Clca> {
    let (_, dj) = inner.shape();
    let (dj2, _) = outer.shape();
    if dj != dj2 {
        return Err(CanError::DimensionMismatch {
            expected: dj,
            got: dj2,
            context: "CLCA composition (inner columns vs outer rows)",
        });
    }
    let structure = inner.structure.as_matrix() * outer.structure.as_matrix();
    Ok(Clca {
        structure: StructureMatrix::from_raw(structure.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))?,
        weights: &inner.weights * &outer.weights,
    })
}

/// Necessary spectral condition for a SEP-compliant CLCA from `sigma_l` to
/// `sigma_h`: `λ_i ≤ κ_i ≤ λ_{i+ℓ−h}` on ascending spectra.
///
/// `slack_tol` is an additive slack; `None` uses `1e-8 · λ_max`.
pub fn interlacing_check(
    sigma_l: &GaussianMeasure,
    sigma_h: &GaussianMeasure,
    slack_tol: Option<f64>,
) -> Result<bool> {
    let (l, h) = (sigma_l.dim(), sigma_h.dim());
    if l < h {
        return Err(CanError::Orientation { low: l, high: h });
    }
    let lam = sigma_l.ascending_spectrum();
    let kap = sigma_h.ascending_spectrum();
    let slack = slack_tol.unwrap_or_else(|| {
        INTERLACING_SLACK * sigma_l.eig().lambda_max().max(sigma_h.eig().lambda_max())
    });
    Ok((0..h).all(|i| lam[i] - slack <= kap[i] && kap[i] <= lam[i + l - h] + slack))
}

/// Entrywise F1 between the support of `learned` (entries above [`SUPPORT_TOL`],
/// restricted to `truth`'s shape) and the ground-truth structure.
pub fn structural_f1(learned: &DMatrix<f64>, truth: &StructureMatrix) -> Result<f64> {
    if learned.shape() != truth.shape() {
        return Err(CanError::Validation(format!(
            "shape mismatch: learned {:?} vs truth {:?}",
            learned.shape(),
            truth.shape()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (v, &t) in learned.iter().zip(truth.as_matrix().iter()) {
        match (v.abs() > SUPPORT_TOL, t == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// True when every column of `B ⊙ V̂` keeps at least one structurally present entry.
pub fn constructiveness(learned: &Clca) -> bool {
    let masked = learned.masked_weights();
    masked.ncols() > 0
        && masked
            .column_iter()
            .all(|col| col.iter().any(|v| v.abs() > SUPPORT_TOL))
}

/// `min_signs ‖V̂ S − V*‖_F / ‖V*‖_F` over diagonal sign matrices `S`.
pub fn frobenius_distance(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimated.shape() != truth.shape() {
        return Err(CanError::Validation(format!(
            "shape mismatch: {:?} vs {:?}",
            estimated.shape(),
            truth.shape()
        )));
    }
    let mut sq = 0.0;
    for (e, t) in estimated.column_iter().zip(truth.column_iter()) {
        let sign = if e.dot(&t) >= 0.0 { 1.0 } else { -1.0 };
        sq += (e * sign - t).norm_squared();
    }
    let scale = truth.norm();
    if scale == 0.0 {
        return Err(CanError::Validation("ground truth has zero norm".into()));
    }
    Ok(sq.sqrt() / scale)
}
