//! The SPECTRAL method: ADMM with closed-form updates on the feasibility
//! problem
//!
//! ```text
//! find V ∈ St(d_i, d_j), T ∈ St(r_i, r_j)  s.t.  T = Aᵀ (B ⊙ V) C
//! ```
//!
//! with `A = U_{i,+} Λ_{i,+}^{1/2}` and `C = U_{j,+} Λ_{j,+}^{-1/2}`, so that
//! `TᵀT = I` is equivalent to `(B ⊙ V)ᵀ Σ_i (B ⊙ V) = Σ_j` on the support of `Σ_j`.
//! The orthogonality of `V` is split off through `Y ∈ St(d_i, d_j)`, and the
//! augmented Lagrangian (penalty 1, scaled duals `Ψ`, `Υ`) is
//!
//! ```text
//! ½‖B⊙V − Y + Ψ‖²_F + ½‖Aᵀ(B⊙V)C − T + Υ‖²_F
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{validate_clca, Clca, StructureMatrix};
use crate::error::{CanError, Result};
use crate::numerics::{
    abstraction_discrepancy, eigendecompose_clamped, polar_prox, random_stiefel, GaussianMeasure,
    StiefelMatrix, DEFAULT_RANK_TOL,
};

/// One edge's learning problem with its spectral factors precomputed.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub sigma_i: GaussianMeasure,
    pub sigma_j: GaussianMeasure,
    pub structure: StructureMatrix,
    /// `U_{i,+} Λ_{i,+}^{1/2}`, `d_i × r_i`.
    pub a: DMatrix<f64>,
    /// `U_{j,+} Λ_{j,+}^{-1/2}`, `d_j × r_j`.
    pub c: DMatrix<f64>,
    /// `Cᵀ`, kept for products on the right.
    c_t: DMatrix<f64>,
    /// Support of the vectorized mask, column-major `(row, col)` pairs.
    support: Vec<(usize, usize)>,
    /// Factor of `I + K_ℬ K_ℬᵀ`; depends only on `A`, `C` and `B`.
    system: Cholesky<f64, Dyn>,
}

impl LocalProblem {
    pub fn d_i(&self) -> usize {
        self.a.nrows()
    }
    pub fn d_j(&self) -> usize {
        self.c.nrows()
    }
    pub fn r_i(&self) -> usize {
        self.a.ncols()
    }
    pub fn r_j(&self) -> usize {
        self.c.ncols()
    }
    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    /// `B ⊙ M`.
    pub fn mask(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.component_mul(self.structure.as_matrix())
    }

    /// `Aᵀ M C`.
    pub fn whiten(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.a.tr_mul(m) * &self.c
    }

    /// `A M Cᵀ`.
    pub fn unwhiten(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * m * &self.c_t
    }

    /// Frobenius norm of `B ⊙ M`.
    fn masked_norm(&self, m: &DMatrix<f64>) -> f64 {
        self.support
            .iter()
            .map(|&(r, c)| m[(r, c)].powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius norm of `B ⊙ (A M Cᵀ)`.
    fn masked_unwhiten_norm(&self, m: &DMatrix<f64>) -> f64 {
        let am = &self.a * m;
        self.support
            .iter()
            .map(|&(r, c)| am.row(r).dot(&self.c.row(c)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// The dense system matrix `I + K_ℬ K_ℬᵀ` (for checks and diagnostics).
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let sa = &self.a * self.a.transpose();
        let sc = &self.c * self.c.transpose();
        let n = self.support.len();
        DMatrix::from_fn(n, n, |p, q| {
            let (ra, cb) = self.support[p];
            let (rc, cd) = self.support[q];
            sa[(ra, rc)] * sc[(cb, cd)] + if p == q { 1.0 } else { 0.0 }
        })
    }
}

pub fn build_local_problem(
    sigma_i: &GaussianMeasure,
    sigma_j: &GaussianMeasure,
    structure: &StructureMatrix,
    rank_tol: f64,
) -> Result<LocalProblem> {
    let (d_i, d_j) = (sigma_i.dim(), sigma_j.dim());
    if d_i < d_j {
        return Err(CanError::Orientation {
            low: d_i,
            high: d_j,
        });
    }
    if structure.shape() != (d_i, d_j) {
        return Err(CanError::Validation(format!(
            "structure shape {:?} does not match ({d_i}, {d_j})",
            structure.shape()
        )));
    }
    let ei = if rank_tol == DEFAULT_RANK_TOL {
        sigma_i.eig().clone()
    } else {
        eigendecompose_clamped(sigma_i.cov(), rank_tol, f64::INFINITY)?
    };
    let ej = if rank_tol == DEFAULT_RANK_TOL {
        sigma_j.eig().clone()
    } else {
        eigendecompose_clamped(sigma_j.cov(), rank_tol, f64::INFINITY)?
    };
    if ei.rank < ej.rank {
        return Err(CanError::InfeasibleShapes {
            r_i: ei.rank,
            r_j: ej.rank,
        });
    }
    let a = ei.scaled_support(0.5);
    let c = ej.scaled_support(-0.5);
    let mut support = Vec::new();
    for col in 0..d_j {
        for row in 0..d_i {
            if structure.as_matrix()[(row, col)] == 1.0 {
                support.push((row, col));
            }
        }
    }
    let mut problem = LocalProblem {
        sigma_i: sigma_i.clone(),
        sigma_j: sigma_j.clone(),
        structure: structure.clone(),
        c_t: c.transpose(),
        a,
        c,
        support,
        system: Cholesky::new(DMatrix::identity(1, 1)).expect("1x1 identity is SPD"),
    };
    problem.system = Cholesky::new(problem.system_matrix()).ok_or_else(|| {
        CanError::Internal("V-update system matrix is not positive definite".into())
    })?;
    Ok(problem)
}

/// Stopping tolerances, iteration cap and restart budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tau_a: f64,
    pub tau_r: f64,
    pub max_iters: usize,
    pub ntrials: usize,
    pub rng_seed: u64,
    /// Largest verification divergence accepted for a converged trial.
    pub kl_zero_tol: f64,
    /// Record the residual trace of every trial.
    #[serde(default)]
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau_a: 1e-4,
            tau_r: 1e-4,
            max_iters: 1000,
            ntrials: 50,
            rng_seed: 0,
            kl_zero_tol: 1e-3,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0 && self.tau_r > 0.0 && self.kl_zero_tol > 0.0) {
            return Err(CanError::Validation(
                "solver tolerances must be positive".into(),
            ));
        }
        if self.max_iters == 0 || self.ntrials == 0 {
            return Err(CanError::Validation(
                "max_iters and ntrials must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Primal, splitting and scaled dual variables of one ADMM run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub v: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub iteration: usize,
}

impl SolverState {
    /// `V⁰` masked Stiefel, `Y⁰ = V⁰`, `T⁰ = prox_St(Aᵀ(B⊙V⁰)C)`, zero duals.
    pub fn initial(problem: &LocalProblem, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v0 = random_stiefel(
            problem.d_i(),
            problem.d_j(),
            Some(&problem.structure),
            &mut rng,
        )?
        .into_inner();
        let t0 = polar_prox(&problem.whiten(&v0))?.factor.into_inner();
        Ok(Self {
            y: v0.clone(),
            psi: DMatrix::zeros(problem.d_i(), problem.d_j()),
            upsilon: DMatrix::zeros(problem.r_i(), problem.r_j()),
            v: v0,
            t: t0,
            iteration: 0,
        })
    }
}

/// Value of the augmented Lagrangian at `state`.
pub fn augmented_lagrangian(state: &SolverState, problem: &LocalProblem) -> f64 {
    let bv = problem.mask(&state.v);
    let first = (&bv - &state.y + &state.psi).norm_squared();
    let second = (problem.whiten(&bv) - &state.t + &state.upsilon).norm_squared();
    0.5 * (first + second)
}

/// Closed-form minimizer over `V` on the mask support:
/// `(I + K_ℬ K_ℬᵀ) v_ℬ = b_ℬ`, `b = vec(Y − Ψ + A (T − Υ) Cᵀ)`.
pub fn update_v(state: &SolverState, problem: &LocalProblem) -> DMatrix<f64> {
    let rhs = &state.y - &state.psi + problem.unwhiten(&(&state.t - &state.upsilon));
    let b = DVector::from_iterator(
        problem.support.len(),
        problem.support.iter().map(|&(r, c)| rhs[(r, c)]),
    );
    let sol = problem.system.solve(&b);
    let mut v = DMatrix::zeros(problem.d_i(), problem.d_j());
    for (k, &(r, c)) in problem.support.iter().enumerate() {
        v[(r, c)] = sol[k];
    }
    v
}

/// `Y = prox_St(B ⊙ V + Ψ)`.
pub fn update_y(state: &SolverState, problem: &LocalProblem) -> Result<StiefelMatrix> {
    Ok(polar_prox(&(problem.mask(&state.v) + &state.psi))?.factor)
}

/// `T = prox_St(Aᵀ(B ⊙ V)C + Υ)`.
pub fn update_t(state: &SolverState, problem: &LocalProblem) -> Result<StiefelMatrix> {
    Ok(polar_prox(&(problem.whiten(&problem.mask(&state.v)) + &state.upsilon))?.factor)
}

/// `Ψ + B⊙V − Y` and `Υ + Aᵀ(B⊙V)C − T`.
pub fn update_duals(state: &SolverState, problem: &LocalProblem) -> (DMatrix<f64>, DMatrix<f64>) {
    let bv = problem.mask(&state.v);
    let psi = &state.psi + &bv - &state.y;
    let upsilon = &state.upsilon + problem.whiten(&bv) - &state.t;
    (psi, upsilon)
}

/// One full ADMM sweep: `V`, then `Y`, then `T`, then the duals.
pub fn admm_step(state: &SolverState, problem: &LocalProblem) -> Result<SolverState> {
    Ok(fused_step(state, problem)?.0)
}

/// [`admm_step`] that also returns `B⊙V` and `Aᵀ(B⊙V)C` of the new iterate.
fn fused_step(state: &SolverState, problem: &LocalProblem) -> Result<(SolverState, DMatrix<f64>)> {
    // update_v is already zero off the support, so it equals B ⊙ V.
    let v = update_v(state, problem);
    let y = polar_prox(&(&v + &state.psi))?.factor.into_inner();
    let wv = problem.whiten(&v);
    let t = polar_prox(&(&wv + &state.upsilon))?.factor.into_inner();
    let psi = &state.psi + &v - &y;
    let upsilon = &state.upsilon + &wv - &t;
    let next = SolverState {
        v,
        y,
        t,
        psi,
        upsilon,
        iteration: state.iteration + 1,
    };
    Ok((next, wv))
}

/// Primal and dual residual norms with their stopping thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub primal_y: f64,
    pub primal_t: f64,
    pub dual_y: f64,
    pub dual_t: f64,
    pub thresh_primal_y: f64,
    pub thresh_primal_t: f64,
    pub thresh_dual_y: f64,
    pub thresh_dual_t: f64,
}

impl ResidualReport {
    pub fn converged(&self) -> bool {
        self.primal_y <= self.thresh_primal_y
            && self.primal_t <= self.thresh_primal_t
            && self.dual_y <= self.thresh_dual_y
            && self.dual_t <= self.thresh_dual_t
    }
}

pub fn residuals(
    prev: &SolverState,
    curr: &SolverState,
    problem: &LocalProblem,
    tau_a: f64,
    tau_r: f64,
) -> ResidualReport {
    let bv = problem.mask(&curr.v);
    let wv = problem.whiten(&bv);
    residuals_given(prev, curr, &bv, &wv, problem, tau_a, tau_r)
}

/// [`residuals`] with `B⊙V` and `Aᵀ(B⊙V)C` of `curr` supplied.
fn residuals_given(
    prev: &SolverState,
    curr: &SolverState,
    bv: &DMatrix<f64>,
    wv: &DMatrix<f64>,
    problem: &LocalProblem,
    tau_a: f64,
    tau_r: f64,
) -> ResidualReport {
    let size_v = ((problem.d_i() * problem.d_j()) as f64).sqrt();
    let size_t = ((problem.r_i() * problem.r_j()) as f64).sqrt();
    ResidualReport {
        primal_y: (&curr.y - bv).norm(),
        primal_t: (&curr.t - wv).norm(),
        dual_y: problem.masked_norm(&(&curr.y - &prev.y)),
        dual_t: problem.masked_unwhiten_norm(&(&curr.t - &prev.t)),
        thresh_primal_y: tau_a * size_v + tau_r * curr.y.norm().max(bv.norm()),
        thresh_primal_t: tau_a * size_t + tau_r * curr.t.norm().max(wv.norm()),
        thresh_dual_y: tau_a * size_v + tau_r * problem.masked_norm(&curr.psi),
        thresh_dual_t: tau_a * size_t + tau_r * problem.masked_unwhiten_norm(&curr.upsilon),
    }
}

/// `B ⊙ V` projected onto the Stiefel manifold with the mask re-applied.
pub fn extract_clca(v: &DMatrix<f64>, problem: &LocalProblem) -> Result<Clca> {
    let p = polar_prox(&problem.mask(v))?;
    let w = problem.mask(p.factor.as_matrix());
    Ok(Clca::new_unchecked(problem.structure.clone(), w))
}

/// Result of a single initialization.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    /// Residual convergence within `max_iters`.
    pub residual_converged: bool,
    /// Residual convergence, a valid CLCA, and verification KL within tolerance.
    pub accepted: bool,
    pub iterations: usize,
    pub clca: Option<Clca>,
    pub kl: Option<f64>,
    pub last_residuals: Option<ResidualReport>,
    pub trace: Vec<ResidualReport>,
}

/// Per-trial seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ trial as u64
}

pub fn run_trial(
    problem: &LocalProblem,
    config: &SolverConfig,
    trial: usize,
) -> Result<TrialResult> {
    let mut state = SolverState::initial(problem, trial_seed(config.rng_seed, trial))?;
    let mut trace = Vec::new();
    let mut last = None;
    let mut converged = false;
    while state.iteration < config.max_iters {
        let (next, wv) = fused_step(&state, problem)?;
        let report = residuals_given(
            &state,
            &next,
            &next.v,
            &wv,
            problem,
            config.tau_a,
            config.tau_r,
        );
        if config.trace {
            trace.push(report);
        }
        last = Some(report);
        state = next;
        if report.converged() {
            converged = true;
            break;
        }
    }
    let clca = extract_clca(&state.v, problem)?;
    let valid = validate_clca(&clca).is_valid();
    let kl = if valid {
        abstraction_discrepancy(&clca.abstraction(), &problem.sigma_i, &problem.sigma_j).ok()
    } else {
        None
    };
    let accepted = converged && kl.is_some_and(|k| k <= config.kl_zero_tol);
    Ok(TrialResult {
        trial,
        residual_converged: converged,
        accepted,
        iterations: state.iteration,
        clca: valid.then_some(clca),
        kl,
        last_residuals: last,
        trace,
    })
}

/// Outcome of [`solve`].
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub converged: bool,
    pub clca: Option<Clca>,
    /// Iterations of the accepted trial, or of the last trial run.
    pub iterations: usize,
    pub trials_used: usize,
    pub final_kl: Option<f64>,
    pub trials: Vec<TrialResult>,
}

/// Runs trials until the first accepted one (lowest trial index wins).
///
/// Trials are evaluated in parallel batches; the outcome is identical to a
/// sequential sweep.
pub fn solve(problem: &LocalProblem, config: &SolverConfig) -> Result<SolveOutcome> {
    config.validate()?;
    let batch = rayon::current_num_threads().max(1);
    let mut trials = Vec::new();
    let mut start = 0;
    while start < config.ntrials {
        let end = (start + batch).min(config.ntrials);
        let results = (start..end)
            .into_par_iter()
            .map(|t| run_trial(problem, config, t))
            .collect::<Result<Vec<_>>>()?;
        for r in results {
            let accepted = r.accepted;
            trials.push(r);
            if accepted {
                let r = trials.last().expect("just pushed");
                return Ok(SolveOutcome {
                    converged: true,
                    clca: r.clca.clone(),
                    iterations: r.iterations,
                    trials_used: r.trial + 1,
                    final_kl: r.kl,
                    trials,
                });
            }
        }
        start = end;
    }
    Ok(SolveOutcome {
        converged: false,
        clca: None,
        iterations: trials.last().map_or(0, |t| t.iterations),
        trials_used: config.ntrials,
        final_kl: None,
        trials,
    })
}

/// Runs every trial and keeps the one with the lowest verification KL among
/// accepted trials, falling back to the lowest KL overall.
pub fn solve_best(problem: &LocalProblem, config: &SolverConfig) -> Result<SolveOutcome> {
    config.validate()?;
    let trials = (0..config.ntrials)
        .into_par_iter()
        .map(|t| run_trial(problem, config, t))
        .collect::<Result<Vec<_>>>()?;
    let pick = |accepted_only: bool| {
        trials
            .iter()
            .filter(|t| t.kl.is_some() && (!accepted_only || t.accepted))
            .min_by(|a, b| a.kl.partial_cmp(&b.kl).unwrap_or(std::cmp::Ordering::Equal))
    };
    let best = pick(true).or_else(|| pick(false));
    Ok(SolveOutcome {
        converged: best.is_some_and(|b| b.accepted),
        clca: best.and_then(|b| b.clca.clone()),
        iterations: best.map_or(0, |b| b.iterations),
        trials_used: config.ntrials,
        final_kl: best.and_then(|b| b.kl),
        trials,
    })
}
