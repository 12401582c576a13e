//! Measure-level and manifold-level primitives.

mod eigen;
mod kl;
mod measure;
mod stiefel;

pub use eigen::{
    check_symmetric, eigendecompose, eigendecompose_clamped, symmetrize, EigenDecomposition,
    DEFAULT_RANK_TOL, SYMMETRY_TOL,
};
pub use kl::{abstraction_discrepancy, kl_gaussian_abstracted};
pub use measure::{
    combine, convex_combine, mixture_distance, pushforward_gaussian, pushforward_mixture,
    GaussianMeasure, MixtureMeasure, MixtureOptions, PSD_TOL,
};
pub use stiefel::{
    polar_prox, random_stiefel, random_stiefel_seeded, stiefel_deviation, PolarFactor,
    StiefelMatrix, STIEFEL_TOL,
};
