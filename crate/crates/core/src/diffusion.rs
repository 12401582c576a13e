//! Cochains and the measure-valued operators of a CAN: coboundary, boundary,
//! the CAN Laplacian operator, and the discrete dynamics
//! `χ_{t+1} = cc_λdyn(χ_t, L(χ_t))`.

use serde::Serialize;

use crate::can_graph::CanSpec;
use crate::error::{CanError, Result};
use crate::numerics::{
    combine, convex_combine, mixture_distance, pushforward_mixture, GaussianMeasure,
    MixtureMeasure, MixtureOptions,
};

/// One mixture per node, in node order.
pub type ZeroCochain = Vec<MixtureMeasure>;

/// One mixture per edge, in edge order; each has the finer endpoint's dimension.
pub type OneCochain = Vec<MixtureMeasure>;

/// Mixing weights of the operators.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    /// `λ` in `χ_e = cc_λ(χ_fine, push(V, χ_coarse))`.
    pub lambda: f64,
    /// Per node, one weight per incident edge (in [`CanSpec::incident_edges`] order).
    pub node_edge_weights: Vec<Vec<f64>>,
    pub lambda_dyn: f64,
    pub mixture: MixtureOptions,
}

impl WeightProfile {
    /// Uniform edge weights per node, `λ = λ_dyn = 0.5`.
    pub fn uniform(can: &CanSpec) -> Self {
        let node_edge_weights = can
            .incident_edges()
            .iter()
            .map(|inc| vec![1.0 / inc.len().max(1) as f64; inc.len()])
            .collect();
        Self {
            lambda: 0.5,
            node_edge_weights,
            lambda_dyn: 0.5,
            mixture: MixtureOptions::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_lambda_dyn(mut self, lambda_dyn: f64) -> Self {
        self.lambda_dyn = lambda_dyn;
        self
    }

    pub fn validate(&self, can: &CanSpec) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda) || !unit.contains(&self.lambda_dyn) {
            return Err(CanError::Validation(
                "lambda and lambda_dyn must lie in [0, 1]".into(),
            ));
        }
        let inc = can.incident_edges();
        if self.node_edge_weights.len() != inc.len() {
            return Err(CanError::DimensionMismatch {
                expected: inc.len(),
                got: self.node_edge_weights.len(),
                context: "edge weights per node",
            });
        }
        for (v, (w, e)) in self.node_edge_weights.iter().zip(&inc).enumerate() {
            if w.len() != e.len() {
                return Err(CanError::Validation(format!(
                    "node position {v} has {} incident edges but {} weights",
                    e.len(),
                    w.len()
                )));
            }
            if w.iter().any(|x| !unit.contains(x)) {
                return Err(CanError::Validation(format!(
                    "edge weight outside [0, 1] at node position {v}"
                )));
            }
            let s: f64 = w.iter().sum();
            if !w.is_empty() && (s - 1.0).abs() > 1e-12 {
                return Err(CanError::Validation(format!(
                    "edge weights at node position {v} sum to {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Single-Gaussian cochain from node measures.
pub fn gaussian_cochain(measures: &[GaussianMeasure]) -> ZeroCochain {
    measures
        .iter()
        .cloned()
        .map(MixtureMeasure::single)
        .collect()
}

fn check_cochain(can: &CanSpec, chi: &ZeroCochain) -> Result<()> {
    if chi.len() != can.len() {
        return Err(CanError::DimensionMismatch {
            expected: can.len(),
            got: chi.len(),
            context: "zero-cochain length",
        });
    }
    for (m, n) in chi.iter().zip(can.nodes()) {
        if m.dim() != n.dim {
            return Err(CanError::DimensionMismatch {
                expected: n.dim,
                got: m.dim(),
                context: "zero-cochain entry",
            });
        }
    }
    Ok(())
}

/// `χ_e = cc_λ(χ_fine, push(V, χ_coarse))` for every edge.
pub fn coboundary(can: &CanSpec, chi: &ZeroCochain, w: &WeightProfile) -> Result<OneCochain> {
    check_cochain(can, chi)?;
    can.edges()
        .iter()
        .zip(can.edge_positions())
        .map(|(e, &(f, c))| {
            let pushed = pushforward_mixture(&e.clca.weights, &chi[c])?;
            convex_combine(w.lambda, &chi[f], &pushed, &w.mixture)
        })
        .collect()
}

/// Per node, the `λ_e`-combination of `χ_e` over edges where it is the head
/// and of `push(Vᵀ, χ_e)` where it is the tail. Nodes without edges take
/// their entry from `fallback`.
pub fn boundary(
    can: &CanSpec,
    chi1: &OneCochain,
    w: &WeightProfile,
    fallback: &ZeroCochain,
) -> Result<ZeroCochain> {
    w.validate(can)?;
    check_cochain(can, fallback)?;
    if chi1.len() != can.edges().len() {
        return Err(CanError::DimensionMismatch {
            expected: can.edges().len(),
            got: chi1.len(),
            context: "one-cochain length",
        });
    }
    let ends = can.edge_positions();
    can.incident_edges()
        .iter()
        .enumerate()
        .map(|(v, inc)| {
            if inc.is_empty() {
                return Ok(fallback[v].clone());
            }
            let parts = inc
                .iter()
                .map(|&e| {
                    if ends[e].0 == v {
                        Ok(chi1[e].clone())
                    } else {
                        pushforward_mixture(&can.edges()[e].clca.abstraction(), &chi1[e])
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MixtureMeasure> = parts.iter().collect();
            combine(&w.node_edge_weights[v], &refs, &w.mixture)
        })
        .collect()
}

/// `L = boundary ∘ coboundary`.
pub fn laplacian_operator(
    can: &CanSpec,
    chi: &ZeroCochain,
    w: &WeightProfile,
) -> Result<ZeroCochain> {
    let edges = coboundary(can, chi, w)?;
    boundary(can, &edges, w, chi)
}

/// The node-local form of the Laplacian operator, evaluated directly:
/// `Σ_head λ_e cc_λ(χ_v, push(V, χ_w)) + Σ_tail λ_e push(Vᵀ, cc_λ(χ_u, push(V, χ_v)))`.
pub fn laplacian_local(can: &CanSpec, chi: &ZeroCochain, w: &WeightProfile) -> Result<ZeroCochain> {
    check_cochain(can, chi)?;
    w.validate(can)?;
    let ends = can.edge_positions();
    can.incident_edges()
        .iter()
        .enumerate()
        .map(|(v, inc)| {
            if inc.is_empty() {
                return Ok(chi[v].clone());
            }
            let mut parts = Vec::with_capacity(inc.len());
            for &e in inc {
                let (f, c) = ends[e];
                let map = &can.edges()[e].clca.weights;
                if f == v {
                    let other = pushforward_mixture(map, &chi[c])?;
                    parts.push(convex_combine(w.lambda, &chi[v], &other, &w.mixture)?);
                } else {
                    let up = pushforward_mixture(map, &chi[v])?;
                    let mixed = convex_combine(w.lambda, &chi[f], &up, &w.mixture)?;
                    parts.push(pushforward_mixture(&map.transpose(), &mixed)?);
                }
            }
            let refs: Vec<&MixtureMeasure> = parts.iter().collect();
            combine(&w.node_edge_weights[v], &refs, &w.mixture)
        })
        .collect()
}

/// One step `χ ↦ cc_λdyn(χ, L(χ))`, nodewise.
pub fn step_dynamics(can: &CanSpec, chi: &ZeroCochain, w: &WeightProfile) -> Result<ZeroCochain> {
    let l = laplacian_operator(can, chi, w)?;
    chi.iter()
        .zip(&l)
        .map(|(a, b)| convex_combine(w.lambda_dyn, a, b, &w.mixture))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub is_fixed: bool,
    /// Per node, the larger of the distances to `L(χ)` and to one dynamics step.
    pub node_deviation: Vec<f64>,
    /// Ids of nodes whose deviation exceeds the tolerance.
    pub flagged: Vec<usize>,
}

/// Checks `χ_v = L(χ)|_v` and `χ_v = cc_λdyn(χ, L(χ))|_v` for every node.
pub fn is_fixed_point(
    can: &CanSpec,
    chi: &ZeroCochain,
    w: &WeightProfile,
    tol: f64,
) -> Result<FixedPointReport> {
    let l = laplacian_operator(can, chi, w)?;
    let node_deviation: Vec<f64> = chi
        .iter()
        .zip(&l)
        .map(|(a, b)| {
            let stepped = convex_combine(w.lambda_dyn, a, b, &w.mixture)?;
            let d1 = mixture_distance(a, b, w.mixture.merge_tol);
            let d2 = mixture_distance(a, &stepped, w.mixture.merge_tol);
            Ok(d1.max(d2))
        })
        .collect::<Result<_>>()?;
    let flagged: Vec<usize> = node_deviation
        .iter()
        .zip(can.nodes())
        .filter(|(d, _)| **d > tol)
        .map(|(_, n)| n.id)
        .collect();
    Ok(FixedPointReport {
        is_fixed: flagged.is_empty(),
        node_deviation,
        flagged,
    })
}

/// Per-step, per-node summary of a diffusion run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub node: usize,
    pub components: usize,
    /// Trace of the mixture's second moment.
    pub trace: f64,
}

fn records(can: &CanSpec, step: usize, chi: &ZeroCochain) -> Vec<TrajectoryRecord> {
    chi.iter()
        .zip(can.nodes())
        .map(|(m, n)| TrajectoryRecord {
            step,
            node: n.id,
            components: m.len(),
            trace: m.second_moment().trace(),
        })
        .collect()
}

/// Runs `steps` iterations of the dynamics; returns the final cochain and
/// the records for steps `0..=steps`.
pub fn diffuse(
    can: &CanSpec,
    chi0: &ZeroCochain,
    w: &WeightProfile,
    steps: usize,
) -> Result<(ZeroCochain, Vec<TrajectoryRecord>)> {
    let mut chi = chi0.clone();
    let mut log = records(can, 0, &chi);
    for t in 1..=steps {
        chi = step_dynamics(can, &chi, w)?;
        log.extend(records(can, t, &chi));
    }
    Ok((chi, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{Clca, StructureMatrix};
    use crate::can_graph::{generate_global_section, Edge, Node};
    use crate::numerics::random_stiefel;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge(fine: usize, coarse: usize, df: usize, dc: usize, rng: &mut ChaCha8Rng) -> Edge {
        let b = StructureMatrix::random(df, dc, rng).unwrap();
        let v = random_stiefel(df, dc, Some(&b), rng).unwrap().into_inner();
        Edge {
            fine,
            coarse,
            clca: Clca::new(b, v).unwrap(),
        }
    }

    fn can(dims: &[usize], pairs: &[(usize, usize)], seed: u64) -> CanSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = dims
            .iter()
            .enumerate()
            .map(|(k, &d)| Node {
                id: k + 1,
                dim: d,
                measure: None,
            })
            .collect();
        let edges = pairs
            .iter()
            .map(|&(f, c)| edge(f, c, dims[f - 1], dims[c - 1], &mut rng))
            .collect();
        CanSpec::new(nodes, edges).unwrap()
    }

    fn spd(d: usize, shift: f64) -> GaussianMeasure {
        GaussianMeasure::new(DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0 + shift + i as f64
            } else {
                0.1 * shift
            }
        }))
        .unwrap()
    }

    fn example() -> (CanSpec, ZeroCochain) {
        let c = can(&[6, 5, 3, 2], &[(1, 2), (2, 3), (2, 4)], 1);
        let chi = gaussian_cochain(&[spd(6, 0.1), spd(5, 0.2), spd(3, 0.3), spd(2, 0.4)]);
        (c, chi)
    }

    fn has(m: &MixtureMeasure, weight: f64, cov: &DMatrix<f64>) -> bool {
        m.components()
            .iter()
            .any(|(w, g)| (w - weight).abs() < 1e-12 && (g.cov() - cov).norm() < 1e-10)
    }

    #[test]
    fn coboundary_on_example() {
        let (c, chi) = example();
        let w = WeightProfile::uniform(&c).with_lambda(0.3);
        let edges = coboundary(&c, &chi, &w).unwrap();
        for (k, (f, cc)) in [(0, 1), (1, 2), (1, 3)].into_iter().enumerate() {
            let v = &c.edges()[k].clca.weights;
            assert_eq!(edges[k].len(), 2);
            assert!(has(&edges[k], 0.3, chi[f].components()[0].1.cov()));
            let pushed = v * chi[cc].components()[0].1.cov() * v.transpose();
            assert!(has(&edges[k], 0.7, &pushed));
        }
    }

    #[test]
    fn lambda_one_copies_fine_measure() {
        let (c, chi) = example();
        let w = WeightProfile::uniform(&c).with_lambda(1.0);
        let edges = coboundary(&c, &chi, &w).unwrap();
        assert_eq!(edges[0], chi[0]);
        assert_eq!(edges[2], chi[1]);
    }

    #[test]
    fn consistent_example_local_terms() {
        let (c, chi) = example();
        let w = WeightProfile::uniform(&c).with_lambda(0.4);
        let l = laplacian_operator(&c, &chi, &w).unwrap();
        let cov = |k: usize| chi[k].components()[0].1.cov().clone();
        let v23 = &c.edges()[1].clca.weights;
        assert_eq!(l[2].len(), 2);
        assert!(has(&l[2], 0.4, &(v23.transpose() * cov(1) * v23)));
        assert!(has(&l[2], 0.6, &cov(2)));
        assert_eq!(l[1].len(), 4);
        let v12 = &c.edges()[0].clca.weights;
        assert!(has(&l[1], 0.4 / 3.0, &(v12.transpose() * cov(0) * v12)));
        assert!(has(&l[1], 1.4 / 3.0, &cov(1)));
        assert_eq!(l[0].len(), 2);
    }

    #[test]
    fn operator_matches_local_form() {
        let (c, chi) = example();
        let mut w = WeightProfile::uniform(&c).with_lambda(0.35);
        w.node_edge_weights[1] = vec![0.2, 0.5, 0.3];
        let a = laplacian_operator(&c, &chi, &w).unwrap();
        let b = laplacian_local(&c, &chi, &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(mixture_distance(x, y, 1e-9) < 1e-10);
        }
    }

    #[test]
    fn section_is_fixed_and_perturbation_is_not() {
        let c = can(&[7, 5, 4, 2], &[(1, 2), (2, 3), (3, 4)], 2);
        let s = generate_global_section(&c, &spd(2, 0.5)).unwrap();
        let chi = gaussian_cochain(&s);
        for ld in [0.0, 0.3, 1.0] {
            let w = WeightProfile::uniform(&c).with_lambda_dyn(ld);
            assert!(is_fixed_point(&c, &chi, &w, 1e-9).unwrap().is_fixed);
            let stepped = step_dynamics(&c, &chi, &w).unwrap();
            for (a, b) in stepped.iter().zip(&chi) {
                assert!(mixture_distance(a, b, 1e-9) < 1e-9);
            }
        }
        let mut bad = s.clone();
        bad[1] = s[1].scaled(1.1);
        let r = is_fixed_point(
            &c,
            &gaussian_cochain(&bad),
            &WeightProfile::uniform(&c),
            1e-9,
        )
        .unwrap();
        assert!(!r.is_fixed);
        assert!(r.flagged.contains(&2));
        assert!(r.flagged.contains(&1) && r.flagged.contains(&3));
    }

    #[test]
    fn dynamics_extremes() {
        let (c, chi) = example();
        let w = WeightProfile::uniform(&c).with_lambda_dyn(1.0);
        assert_eq!(step_dynamics(&c, &chi, &w).unwrap(), chi);
        let w0 = WeightProfile::uniform(&c).with_lambda_dyn(0.0);
        let l = laplacian_operator(&c, &chi, &w0).unwrap();
        let s = step_dynamics(&c, &chi, &w0).unwrap();
        for (a, b) in s.iter().zip(&l) {
            assert!(mixture_distance(a, b, 1e-9) < 1e-14);
        }
    }

    #[test]
    fn isolated_node_passes_through() {
        let c = can(&[3, 2, 2], &[(1, 2)], 3);
        let chi = gaussian_cochain(&[spd(3, 0.1), spd(2, 0.2), spd(2, 0.3)]);
        let w = WeightProfile::uniform(&c);
        let l = laplacian_operator(&c, &chi, &w).unwrap();
        assert_eq!(l[2], chi[2]);
        let single = can(&[3], &[], 4);
        let one = gaussian_cochain(&[spd(3, 0.1)]);
        assert!(
            is_fixed_point(&single, &one, &WeightProfile::uniform(&single), 1e-9)
                .unwrap()
                .is_fixed
        );
    }

    #[test]
    fn single_edge_boundary() {
        let c = can(&[4, 2], &[(1, 2)], 5);
        let chi = gaussian_cochain(&[spd(4, 0.1), spd(2, 0.2)]);
        let w = WeightProfile::uniform(&c);
        let e = coboundary(&c, &chi, &w).unwrap();
        let b = boundary(&c, &e, &w, &chi).unwrap();
        assert_eq!(b[0], e[0]);
        let v = &c.edges()[0].clca.weights;
        assert_eq!(b[1], pushforward_mixture(&v.transpose(), &e[0]).unwrap());
    }

    #[test]
    fn trajectory_has_one_record_per_node_and_step() {
        let (c, chi) = example();
        let w = WeightProfile::uniform(&c);
        let (_, log) = diffuse(&c, &chi, &w, 2).unwrap();
        assert_eq!(log.len(), 12);
        assert!(log.iter().all(|r| r.components >= 1 && r.trace > 0.0));
    }
}
