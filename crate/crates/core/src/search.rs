//! Structure learning over a set of node measures: the interlacing candidate
//! matrix `P`, edge-wise SPECTRAL solves pruned by transitive closure, and
//! the transitive reduction of the confirmed relation.
//!
//! Relations are square boolean matrices over node positions in descending
//! order of dimension. Entry `[i][j]` with `i > j` relates the finer node `j`
//! to the coarser node `i`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::abstraction::{compose_clca, interlacing_check, Clca, StructureMatrix};
use crate::error::{CanError, Result};
use crate::numerics::{GaussianMeasure, DEFAULT_RANK_TOL};
use crate::spectral::{build_local_problem, solve, SolverConfig};

pub type Relation = Vec<Vec<bool>>;

pub fn empty_relation(n: usize) -> Relation {
    vec![vec![false; n]; n]
}

fn check_square(m: &Relation) -> Result<usize> {
    let n = m.len();
    if let Some(row) = m.iter().find(|r| r.len() != n) {
        return Err(CanError::DimensionMismatch {
            expected: n,
            got: row.len(),
            context: "relation row length",
        });
    }
    Ok(n)
}

/// Reachability closure (Warshall).
pub fn transitive_closure(m: &Relation) -> Result<Relation> {
    let n = check_square(m)?;
    let mut c = m.clone();
    for k in 0..n {
        for i in 0..n {
            if c[i][k] {
                for j in 0..n {
                    if c[k][j] {
                        c[i][j] = true;
                    }
                }
            }
        }
    }
    Ok(c)
}

/// Minimal relation with the same closure. Fails on cycles.
pub fn transitive_reduction(m: &Relation) -> Result<Relation> {
    let n = check_square(m)?;
    let c = transitive_closure(m)?;
    if let Some(i) = (0..n).find(|&i| c[i][i]) {
        return Err(CanError::Cycle(i));
    }
    let mut r = c.clone();
    for i in 0..n {
        for j in 0..n {
            if c[i][j] && (0..n).any(|k| k != i && k != j && c[i][k] && c[k][j]) {
                r[i][j] = false;
            }
        }
    }
    Ok(r)
}

/// Pairs `(i, j)` with `i > j` set in `m`, by subdiagonal then row.
pub fn lower_pairs(m: &Relation) -> Vec<(usize, usize)> {
    let n = m.len();
    (1..n)
        .flat_map(|k| (k..n).map(move |i| (i, i - k)))
        .filter(|&(i, j)| m[i][j])
        .collect()
}

fn check_sorted(measures: &[GaussianMeasure]) -> Result<()> {
    if measures.windows(2).any(|w| w[0].dim() < w[1].dim()) {
        return Err(CanError::Validation(
            "measures must be sorted by descending dimension".into(),
        ));
    }
    Ok(())
}

/// Candidate matrix from a subdiagonal sweep: pairs already implied by the
/// closure of earlier levels are not tested; `P` is re-closed after each level.
pub fn build_candidates(measures: &[GaussianMeasure], slack_tol: Option<f64>) -> Result<Relation> {
    Ok(sweep_candidates(measures, slack_tol)?.0)
}

/// The candidate matrix together with the set of pairs that were actually
/// tested (as opposed to implied).
fn sweep_candidates(
    measures: &[GaussianMeasure],
    slack_tol: Option<f64>,
) -> Result<(Relation, Relation)> {
    check_sorted(measures)?;
    let n = measures.len();
    let mut p = empty_relation(n);
    let mut tested = empty_relation(n);
    for k in 1..n {
        for i in k..n {
            let j = i - k;
            if p[i][j] {
                continue;
            }
            tested[i][j] = true;
            p[i][j] = interlacing_check(&measures[j], &measures[i], slack_tol)?;
        }
        p = transitive_closure(&p)?;
    }
    Ok((p, tested))
}

/// Why a pair did or did not end up in the learned relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Confirmed,
    ImpliedByClosure,
    SolverFailed,
    InterlacingFailed,
}

/// One line of search progress, indexed by node position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    /// Coarser node position.
    pub i: usize,
    /// Finer node position.
    pub j: usize,
    pub decision: Decision,
    pub trials_used: usize,
    pub final_kl: Option<f64>,
    /// The pair was only implied in `P` and had to be examined because a
    /// supporting relation failed to confirm.
    pub reenqueued: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    /// Additive interlacing slack; `None` uses the default relative slack.
    pub slack_tol: Option<f64>,
    /// Solve closure pairs directly instead of composing learned maps.
    pub resolve_closure: bool,
}

#[derive(Debug, Clone)]
pub struct LearnedAdjacency {
    /// Transitive reduction of the confirmed relation.
    pub a: Relation,
    pub closure: Relation,
    /// One map per closure pair, keyed `(i, j)` with `i` coarser: learned on
    /// reduction pairs, composed (or re-solved) on the others.
    pub maps: BTreeMap<(usize, usize), Clca>,
    pub candidates: Relation,
    pub records: Vec<PairRecord>,
    pub solver_calls: usize,
}

struct Attempt {
    clca: Option<Clca>,
    trials_used: usize,
    final_kl: Option<f64>,
    diagnostic: Option<String>,
}

fn attempt(
    measures: &[GaussianMeasure],
    structures: &BTreeMap<(usize, usize), StructureMatrix>,
    config: &SolverConfig,
    (i, j): (usize, usize),
) -> Result<Attempt> {
    let b = structures.get(&(i, j)).ok_or_else(|| {
        CanError::Validation(format!("no structure for pair (coarse {i}, fine {j})"))
    })?;
    let outcome = build_local_problem(&measures[j], &measures[i], b, DEFAULT_RANK_TOL)
        .and_then(|p| solve(&p, config));
    Ok(match outcome {
        Ok(o) => Attempt {
            clca: if o.converged { o.clca } else { None },
            trials_used: o.trials_used,
            final_kl: o.final_kl,
            diagnostic: None,
        },
        Err(e) => Attempt {
            clca: None,
            trials_used: 0,
            final_kl: None,
            diagnostic: Some(e.to_string()),
        },
    })
}

/// Learns the CAN relation from node measures (sorted by descending
/// dimension) and per-pair structures keyed `(coarse position, fine position)`.
pub fn learn_can(
    measures: &[GaussianMeasure],
    structures: &BTreeMap<(usize, usize), StructureMatrix>,
    config: &SolverConfig,
    opts: &SearchOptions,
) -> Result<LearnedAdjacency> {
    config.validate()?;
    let n = measures.len();
    let (p, tested) = sweep_candidates(measures, opts.slack_tol)?;
    let mut confirmed = empty_relation(n);
    let mut closure = empty_relation(n);
    let mut maps = BTreeMap::new();
    let mut records = Vec::new();
    let mut solver_calls = 0;

    for k in 1..n {
        let mut to_solve = Vec::new();
        for i in k..n {
            let j = i - k;
            let reenqueued = p[i][j] && !tested[i][j];
            if closure[i][j] {
                records.push(PairRecord {
                    i,
                    j,
                    decision: Decision::ImpliedByClosure,
                    trials_used: 0,
                    final_kl: None,
                    reenqueued: false,
                    diagnostic: None,
                });
                continue;
            }
            let passes = if !p[i][j] {
                false
            } else if reenqueued {
                interlacing_check(&measures[j], &measures[i], opts.slack_tol)?
            } else {
                true
            };
            if !passes {
                records.push(PairRecord {
                    i,
                    j,
                    decision: Decision::InterlacingFailed,
                    trials_used: 0,
                    final_kl: None,
                    reenqueued,
                    diagnostic: None,
                });
                continue;
            }
            to_solve.push((i, j, reenqueued));
        }
        solver_calls += to_solve.len();
        let attempts = to_solve
            .par_iter()
            .map(|&(i, j, _)| attempt(measures, structures, config, (i, j)))
            .collect::<Result<Vec<_>>>()?;
        for (&(i, j, reenqueued), at) in to_solve.iter().zip(attempts) {
            let decision = if at.clca.is_some() {
                Decision::Confirmed
            } else {
                Decision::SolverFailed
            };
            log::debug!(
                "pair ({i}, {j}): {decision:?} after {} trials",
                at.trials_used
            );
            if let Some(c) = at.clca {
                confirmed[i][j] = true;
                maps.insert((i, j), c);
            }
            records.push(PairRecord {
                i,
                j,
                decision,
                trials_used: at.trials_used,
                final_kl: at.final_kl,
                reenqueued,
                diagnostic: at.diagnostic,
            });
        }
        closure = transitive_closure(&confirmed)?;
    }

    let a = transitive_reduction(&confirmed)?;
    maps.retain(|key, _| a[key.0][key.1]);
    for (i, j) in lower_pairs(&closure) {
        if a[i][j] {
            continue;
        }
        if opts.resolve_closure {
            solver_calls += 1;
            if let Some(c) = attempt(measures, structures, config, (i, j))?.clca {
                maps.insert((i, j), c);
                continue;
            }
        }
        maps.insert((i, j), compose_path(&a, &maps, i, j)?);
    }
    Ok(LearnedAdjacency {
        a,
        closure,
        maps,
        candidates: p,
        records,
        solver_calls,
    })
}

/// Composes reduction maps along the path from finer `j` up to coarser `i`
/// that always steps to the nearest reachable intermediate node.
pub(crate) fn compose_path(
    a: &Relation,
    maps: &BTreeMap<(usize, usize), Clca>,
    i: usize,
    j: usize,
) -> Result<Clca> {
    let closure = transitive_closure(a)?;
    let mut cur = j;
    let mut acc: Option<Clca> = None;
    while cur != i {
        let next = (cur + 1..=i)
            .find(|&m| a[m][cur] && (m == i || closure[i][m]))
            .ok_or_else(|| CanError::Internal(format!("no path from {j} to {i}")))?;
        let step = maps
            .get(&(next, cur))
            .ok_or_else(|| CanError::Internal(format!("missing map for ({next}, {cur})")))?;
        acc = Some(match acc {
            None => step.clone(),
            Some(prev) => compose_clca(&prev, step)?,
        });
        cur = next;
    }
    acc.ok_or_else(|| CanError::Internal("empty path".into()))
}

/// False and true positive rates of `closure(learned)` against the true
/// closure over the strictly lower triangle. `0/0` gives `fpr = 0`, `tpr = 1`.
pub fn fpr_tpr(learned: &Relation, truth_closure: &Relation) -> Result<(f64, f64)> {
    let n = check_square(learned)?;
    if check_square(truth_closure)? != n {
        return Err(CanError::DimensionMismatch {
            expected: n,
            got: truth_closure.len(),
            context: "relation sizes",
        });
    }
    let l = transitive_closure(learned)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for i in 1..n {
        for j in 0..i {
            match (l[i][j], truth_closure[i][j]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    let fpr = if fp + tn == 0 {
        0.0
    } else {
        fp as f64 / (fp + tn) as f64
    };
    let tpr = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok((fpr, tpr))
}
