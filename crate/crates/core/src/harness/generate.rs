use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::abstraction::{interlacing_check, validate_clca, Clca, StructureMatrix};
use crate::can_graph::{
    check_consistency, generate_global_section, supports_global_sections, CanSpec, Edge, Node,
};
use crate::diffusion::{gaussian_cochain, is_fixed_point, WeightProfile};
use crate::error::{CanError, Result};
use crate::numerics::{abstraction_discrepancy, random_stiefel, GaussianMeasure, STIEFEL_TOL};
use crate::search::{compose_path, empty_relation, transitive_closure, Relation};

/// Ridge added to the Gram matrix of random covariances.
pub const PD_RIDGE: f64 = 1e-3;

/// Tolerance of the generation-time fixed-point and spectrum checks.
pub const SECTION_TOL: f64 = 1e-9;

/// Seed of instance `index` in a run seeded with `seed`.
pub fn instance_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// `X Xᵀ + 1e-3·I` with `X` a `d × d` standard normal matrix.
pub fn random_pd_covariance<R: Rng + ?Sized>(d: usize, rng: &mut R) -> GaussianMeasure {
    let x = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    GaussianMeasure::from_psd(&x * x.transpose() + DMatrix::identity(d, d) * PD_RIDGE)
}

/// A planted single-edge problem.
#[derive(Debug, Clone)]
pub struct LocalInstance {
    pub ell: usize,
    pub h: usize,
    pub seed: u64,
    pub sigma_l: GaussianMeasure,
    pub sigma_h: GaussianMeasure,
    pub truth: Clca,
}

pub fn gen_local_instance(ell: usize, h: usize, seed: u64) -> Result<LocalInstance> {
    if h == 0 || ell <= h {
        return Err(CanError::Validation(format!(
            "need ell > h >= 1, got ({ell}, {h})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = StructureMatrix::random(ell, h, &mut rng)?;
    let v = random_stiefel(ell, h, Some(&b), &mut rng)?;
    let truth = Clca::from_stiefel(b, v)?;
    let sigma_l = random_pd_covariance(ell, &mut rng);
    let sigma_h = GaussianMeasure::from_psd(truth.abstraction() * sigma_l.cov() * &truth.weights);
    if !interlacing_check(&sigma_l, &sigma_h, None)? {
        return Err(CanError::Internal(
            "planted instance violates interlacing".into(),
        ));
    }
    Ok(LocalInstance {
        ell,
        h,
        seed,
        sigma_l,
        sigma_h,
        truth,
    })
}

/// Reduction topologies over nodes sorted from finest to coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Each node points to the next coarser one.
    Chain,
    /// Every node points to the coarsest one.
    Star,
    /// Binary tree rooted at the coarsest node, filled level by level from
    /// the coarse end. At `N = 10` this is the fixed tree used in benchmarks.
    Tree,
    /// Each node points to a uniformly chosen coarser node.
    RandomTree,
}

impl Topology {
    pub const BENCHMARK: [Topology; 3] = [Topology::Chain, Topology::Star, Topology::Tree];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Chain => "chain",
            Topology::Star => "star",
            Topology::Tree => "tree",
            Topology::RandomTree => "random-tree",
        }
    }

    /// Reduction edges as `(coarse position, fine position)`.
    pub fn edges<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        match self {
            Topology::Chain => (0..n.saturating_sub(1)).map(|k| (k + 1, k)).collect(),
            Topology::Star => (0..n.saturating_sub(1)).map(|k| (n - 1, k)).collect(),
            Topology::Tree => (1..n)
                .rev()
                .map(|rank| (n - 1 - (rank - 1) / 2, n - 1 - rank))
                .collect(),
            Topology::RandomTree => (0..n.saturating_sub(1))
                .map(|k| (rng.random_range(k + 1..n), k))
                .collect(),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = CanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Topology::Chain),
            "star" => Ok(Topology::Star),
            "tree" => Ok(Topology::Tree),
            "random-tree" => Ok(Topology::RandomTree),
            _ => Err(CanError::Validation(format!("unknown topology `{s}`"))),
        }
    }
}

/// A generated CAN with its global section and ground truth.
#[derive(Debug, Clone)]
pub struct CanInstance {
    pub topology: Topology,
    pub seed: u64,
    /// Reduction edges; every node carries its section measure.
    pub can: CanSpec,
    /// Ground-truth relation over positions (`[coarse][fine]`).
    pub truth_closure: Relation,
    /// Truth maps of every closure pair, keyed `(coarse, fine)` positions.
    pub closure_maps: BTreeMap<(usize, usize), Clca>,
    /// Structure of every lower pair: the truth structure on closure pairs,
    /// a random valid structure elsewhere.
    pub structures: BTreeMap<(usize, usize), StructureMatrix>,
}

impl CanInstance {
    pub fn section(&self) -> Vec<GaussianMeasure> {
        self.can.measures().expect("generated nodes carry measures")
    }
}

/// Samples `n` dims in `[lo, hi]`, sorted descending, with the ends pinned.
fn sample_dims<R: Rng + ?Sized>(n: usize, lo: usize, hi: usize, rng: &mut R) -> Vec<usize> {
    let mut d: Vec<usize> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    d.sort_unstable_by(|a, b| b.cmp(a));
    d[0] = hi;
    d[n - 1] = lo;
    d
}

pub fn gen_can_instance(
    topology: Topology,
    n: usize,
    dim_lo: usize,
    dim_hi: usize,
    seed: u64,
) -> Result<CanInstance> {
    if n < 2 || dim_lo < 2 || dim_lo > dim_hi {
        return Err(CanError::Validation(format!(
            "need N >= 2 and 2 <= dim_lo <= dim_hi, got N = {n}, dims [{dim_lo}, {dim_hi}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = sample_dims(n, dim_lo, dim_hi, &mut rng);
    let reduction = topology.edges(n, &mut rng);

    let mut a = empty_relation(n);
    let mut maps = BTreeMap::new();
    let mut edges = Vec::with_capacity(reduction.len());
    for &(i, j) in &reduction {
        let b = StructureMatrix::random(dims[j], dims[i], &mut rng)?;
        let v = random_stiefel(dims[j], dims[i], Some(&b), &mut rng)?;
        let clca = Clca::from_stiefel(b, v)?;
        a[i][j] = true;
        edges.push(Edge {
            fine: j + 1,
            coarse: i + 1,
            clca: clca.clone(),
        });
        maps.insert((i, j), clca);
    }
    let truth_closure = transitive_closure(&a)?;

    let mut closure_maps = BTreeMap::new();
    let mut structures = BTreeMap::new();
    for i in 1..n {
        for j in 0..i {
            if truth_closure[i][j] {
                let m = compose_path(&a, &maps, i, j)?;
                structures.insert((i, j), m.structure.clone());
                closure_maps.insert((i, j), m);
            } else {
                structures.insert((i, j), StructureMatrix::random(dims[j], dims[i], &mut rng)?);
            }
        }
    }

    let nodes = dims
        .iter()
        .enumerate()
        .map(|(p, &dim)| Node {
            id: p + 1,
            dim,
            measure: None,
        })
        .collect();
    let bare = CanSpec::new(nodes, edges)?;
    let coarsest = random_pd_covariance(dim_lo, &mut rng);
    let section = generate_global_section(&bare, &coarsest)?;
    let can = bare.with_measures(&section)?;
    let inst = CanInstance {
        topology,
        seed,
        can,
        truth_closure,
        closure_maps,
        structures,
    };
    assert_section(&inst, &section)?;
    Ok(inst)
}

/// Generation-time guarantees: consistency, support for global sections,
/// the fixed-point property, zero divergence on closure maps and a shared
/// nonzero spectrum.
fn assert_section(inst: &CanInstance, section: &[GaussianMeasure]) -> Result<()> {
    let fail = |what: &str| Err(CanError::Internal(format!("generated instance {what}")));
    let can = &inst.can;
    if !check_consistency(can, STIEFEL_TOL).consistent {
        return fail("is not consistent");
    }
    if !supports_global_sections(can)? {
        return fail("does not support global sections");
    }
    let chi = gaussian_cochain(section);
    for lambda_dyn in [0.0, 0.5, 1.0] {
        let w = WeightProfile::uniform(can).with_lambda_dyn(lambda_dyn);
        if !is_fixed_point(can, &chi, &w, SECTION_TOL)?.is_fixed {
            return fail("section is not a fixed point");
        }
    }
    for (&(i, j), m) in &inst.closure_maps {
        let kl = abstraction_discrepancy(&m.abstraction(), &section[j], &section[i])?;
        if kl > 1e-8 {
            return fail(&format!("closure pair ({i}, {j}) has divergence {kl:e}"));
        }
        if !validate_clca(m).is_valid() {
            return fail(&format!("closure pair ({i}, {j}) has an invalid map"));
        }
    }
    if shared_spectrum_gap(section) > SECTION_TOL {
        return fail("does not share a nonzero spectrum");
    }
    Ok(())
}

/// Largest relative gap between the top `h` eigenvalues of any measure and
/// those of the coarsest, `h` being the smallest dimension.
pub fn shared_spectrum_gap(section: &[GaussianMeasure]) -> f64 {
    let h = section.iter().map(|m| m.dim()).min().unwrap_or(0);
    let top = |m: &GaussianMeasure| {
        let s = m.ascending_spectrum();
        s[s.len() - h..].to_vec()
    };
    let Some(reference) = section.iter().find(|m| m.dim() == h).map(top) else {
        return 0.0;
    };
    let scale = reference
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()))
        .max(f64::MIN_POSITIVE);
    section
        .iter()
        .flat_map(|m| {
            top(m)
                .into_iter()
                .zip(reference.clone())
                .map(|(a, b)| (a - b).abs())
        })
        .fold(0.0, f64::max)
        / scale
}
