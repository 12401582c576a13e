//! The CAN object and its block invariants.
//!
//! Nodes are kept in descending order of dimension (ties by ascending id).
//! An edge joins a finer node (the head, embedding side) to a coarser node
//! (the tail, abstraction side) and carries the embedding `V` of shape
//! `d_fine × d_coarse`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::abstraction::Clca;
use crate::error::{CanError, Result};
use crate::numerics::{kl_gaussian_abstracted, stiefel_deviation, GaussianMeasure, STIEFEL_TOL};

/// Relative threshold for a Laplacian eigenvalue to count as zero.
pub const KERNEL_EIG_TOL: f64 = 1e-8;

/// Largest disagreement allowed between the two Laplacian formulas.
pub const LAPLACIAN_IDENTITY_TOL: f64 = 1e-10;

/// Largest disagreement allowed between composites along different paths.
pub const PATH_CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub dim: usize,
    pub measure: Option<GaussianMeasure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Id of the finer endpoint.
    pub fine: usize,
    /// Id of the coarser endpoint.
    pub coarse: usize,
    pub clca: Clca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanSpec {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    /// `(fine position, coarse position)` per edge.
    ends: Vec<(usize, usize)>,
}

impl CanSpec {
    /// Sorts the nodes and validates ids, orientation and edge shapes.
    pub fn new(mut nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        nodes.sort_by(|a, b| b.dim.cmp(&a.dim).then(a.id.cmp(&b.id)));
        let mut ids = BTreeSet::new();
        for n in &nodes {
            if n.dim == 0 {
                return Err(CanError::Validation(format!(
                    "node {} has dimension 0",
                    n.id
                )));
            }
            if !ids.insert(n.id) {
                return Err(CanError::Validation(format!("duplicate node id {}", n.id)));
            }
            if let Some(m) = &n.measure {
                if m.dim() != n.dim {
                    return Err(CanError::DimensionMismatch {
                        expected: n.dim,
                        got: m.dim(),
                        context: "node measure",
                    });
                }
            }
        }
        let pos = |id: usize| {
            nodes
                .iter()
                .position(|n| n.id == id)
                .ok_or_else(|| CanError::Validation(format!("edge references unknown node {id}")))
        };
        let mut ends = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for e in &edges {
            let (f, c) = (pos(e.fine)?, pos(e.coarse)?);
            if f == c {
                return Err(CanError::Validation(format!(
                    "self-loop at node {}",
                    e.fine
                )));
            }
            if !seen.insert((f.min(c), f.max(c))) {
                return Err(CanError::Validation(format!(
                    "duplicate edge between {} and {}",
                    e.fine, e.coarse
                )));
            }
            let (df, dc) = (nodes[f].dim, nodes[c].dim);
            if df < dc {
                return Err(CanError::Orientation { low: df, high: dc });
            }
            if e.clca.shape() != (df, dc) {
                return Err(CanError::Validation(format!(
                    "edge ({}, {}) map has shape {:?}, expected ({df}, {dc})",
                    e.fine,
                    e.coarse,
                    e.clca.shape()
                )));
            }
            ends.push((f, c));
        }
        Ok(Self { nodes, edges, ends })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn dims(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.dim).collect()
    }
    pub fn total_dim(&self) -> usize {
        self.nodes.iter().map(|n| n.dim).sum()
    }

    /// Position of a node id in the sorted order.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// `(fine position, coarse position)` for every edge, in edge order.
    pub fn edge_positions(&self) -> &[(usize, usize)] {
        &self.ends
    }

    /// The node measures in node order, if every node has one.
    pub fn measures(&self) -> Option<Vec<GaussianMeasure>> {
        self.nodes.iter().map(|n| n.measure.clone()).collect()
    }

    /// Copy with node measures replaced (given in node order).
    pub fn with_measures(&self, measures: &[GaussianMeasure]) -> Result<Self> {
        if measures.len() != self.nodes.len() {
            return Err(CanError::DimensionMismatch {
                expected: self.nodes.len(),
                got: measures.len(),
                context: "one measure per node",
            });
        }
        let mut out = self.clone();
        for (n, m) in out.nodes.iter_mut().zip(measures) {
            if m.dim() != n.dim {
                return Err(CanError::DimensionMismatch {
                    expected: n.dim,
                    got: m.dim(),
                    context: "node measure",
                });
            }
            n.measure = Some(m.clone());
        }
        Ok(out)
    }

    /// Edge indices incident to each node position.
    pub fn incident_edges(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.nodes.len()];
        for (e, &(f, c)) in self.ends.iter().enumerate() {
            inc[f].push(e);
            inc[c].push(e);
        }
        inc
    }

    /// Connected components as sorted lists of node positions.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let inc = self.incident_edges();
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let k = out.len();
            let mut members = vec![s];
            comp[s] = k;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &e in &inc[u] {
                    let (f, c) = self.ends[e];
                    let w = if f == u { c } else { f };
                    if comp[w] == usize::MAX {
                        comp[w] = k;
                        members.push(w);
                        queue.push_back(w);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}

/// Dense matrix partitioned into row and column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    pub row_sizes: Vec<usize>,
    pub col_sizes: Vec<usize>,
    pub dense: DMatrix<f64>,
}

impl BlockMatrix {
    pub fn zeros(row_sizes: Vec<usize>, col_sizes: Vec<usize>) -> Self {
        let dense = DMatrix::zeros(row_sizes.iter().sum(), col_sizes.iter().sum());
        Self {
            row_sizes,
            col_sizes,
            dense,
        }
    }

    fn offset(sizes: &[usize], k: usize) -> usize {
        sizes[..k].iter().sum()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let (r, c) = (
            Self::offset(&self.row_sizes, i),
            Self::offset(&self.col_sizes, j),
        );
        self.dense
            .view((r, c), (self.row_sizes[i], self.col_sizes[j]))
            .into_owned()
    }

    pub fn set_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        let (r, c) = (
            Self::offset(&self.row_sizes, i),
            Self::offset(&self.col_sizes, j),
        );
        self.dense
            .view_mut((r, c), (self.row_sizes[i], self.col_sizes[j]))
            .copy_from(m);
    }

    pub fn add_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        let (r, c) = (
            Self::offset(&self.row_sizes, i),
            Self::offset(&self.col_sizes, j),
        );
        let mut v = self
            .dense
            .view_mut((r, c), (self.row_sizes[i], self.col_sizes[j]));
        v += m;
    }
}

/// `𝔸`: `V` in the (fine, coarse) block, `Vᵀ` in the (coarse, fine) block.
pub fn adjacency(can: &CanSpec) -> BlockMatrix {
    let dims = can.dims();
    let mut a = BlockMatrix::zeros(dims.clone(), dims);
    for (e, &(f, c)) in can.edges.iter().zip(&can.ends) {
        a.set_block(f, c, &e.clca.weights);
        a.set_block(c, f, &e.clca.weights.transpose());
    }
    a
}

/// `𝔻`: identity per edge where the node is finer, `VᵀV` per edge where it
/// is coarser.
pub fn degree(can: &CanSpec) -> BlockMatrix {
    let dims = can.dims();
    let mut d = BlockMatrix::zeros(dims.clone(), dims.clone());
    for (e, &(f, c)) in can.edges.iter().zip(&can.ends) {
        d.add_block(f, f, &DMatrix::identity(dims[f], dims[f]));
        let v = &e.clca.weights;
        d.add_block(c, c, &(v.transpose() * v));
    }
    d
}

/// `𝔹`: one block column per edge with `I` at the head and `−Vᵀ` at the tail.
pub fn incidence(can: &CanSpec) -> BlockMatrix {
    let dims = can.dims();
    let cols = can.ends.iter().map(|&(f, _)| dims[f]).collect();
    let mut b = BlockMatrix::zeros(dims.clone(), cols);
    for (k, (e, &(f, c))) in can.edges.iter().zip(&can.ends).enumerate() {
        b.set_block(f, k, &DMatrix::identity(dims[f], dims[f]));
        b.set_block(c, k, &(-e.clca.weights.transpose()));
    }
    b
}

/// `𝕃 = 𝔻 − 𝔸`, checked against `𝔹𝔹ᵀ`.
pub fn laplacian(can: &CanSpec) -> Result<BlockMatrix> {
    let d = degree(can);
    let a = adjacency(can);
    let b = incidence(can);
    let l = &d.dense - &a.dense;
    let gap = (&l - &b.dense * b.dense.transpose()).norm();
    if gap > LAPLACIAN_IDENTITY_TOL {
        return Err(CanError::Internal(format!(
            "D - A and B B^T differ by {gap:e}"
        )));
    }
    Ok(BlockMatrix {
        row_sizes: d.row_sizes,
        col_sizes: d.col_sizes,
        dense: l,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeDeviation {
    pub fine: usize,
    pub coarse: usize,
    /// `‖VᵀV − I‖_F`.
    pub deviation: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    pub edges: Vec<EdgeDeviation>,
}

/// A CAN is consistent iff every edge map is Stiefel within `tol`.
pub fn check_consistency(can: &CanSpec, tol: f64) -> ConsistencyReport {
    let edges: Vec<_> = can
        .edges
        .iter()
        .map(|e| {
            let deviation = stiefel_deviation(&e.clca.weights);
            EdgeDeviation {
                fine: e.fine,
                coarse: e.coarse,
                deviation,
                consistent: deviation <= tol,
            }
        })
        .collect();
    ConsistencyReport {
        consistent: edges.iter().all(|e| e.consistent),
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reachability {
    pub all_reachable: bool,
    /// Ids not reachable from the coarsest node of their component.
    pub unreachable: Vec<usize>,
    /// Id of the coarsest node of each component.
    pub roots: Vec<usize>,
}

/// Follows the embedding orientation (coarse → fine) from the coarsest node
/// of each connected component.
pub fn reachability_from_coarsest(can: &CanSpec) -> Reachability {
    let inc = can.incident_edges();
    let mut reached = vec![false; can.len()];
    let mut roots = Vec::new();
    for comp in can.components() {
        let root = *comp.last().expect("components are nonempty");
        roots.push(can.nodes[root].id);
        reached[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &e in &inc[u] {
                let (f, c) = can.ends[e];
                if c == u && !reached[f] {
                    reached[f] = true;
                    queue.push_back(f);
                }
            }
        }
    }
    let unreachable: Vec<usize> = reached
        .iter()
        .zip(&can.nodes)
        .filter(|(r, _)| !**r)
        .map(|(_, n)| n.id)
        .collect();
    Reachability {
        all_reachable: unreachable.is_empty(),
        unreachable,
        roots,
    }
}

/// Number of Laplacian eigenvalues below `eig_tol · λ_max`.
pub fn kernel_multiplicity(can: &CanSpec, eig_tol: f64) -> Result<usize> {
    if !check_consistency(can, STIEFEL_TOL).consistent {
        log::warn!("kernel multiplicity requested for an inconsistent CAN");
    }
    let l = laplacian(can)?;
    let ev = l.dense.symmetric_eigenvalues();
    let top = ev.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if top == 0.0 {
        return Ok(ev.len());
    }
    Ok(ev.iter().filter(|&&v| v < eig_tol * top).count())
}

/// Consistent, every node reachable from its component's coarsest node, and
/// kernel dimension equal to the sum of the coarsest dimensions.
pub fn supports_global_sections(can: &CanSpec) -> Result<bool> {
    if !check_consistency(can, STIEFEL_TOL).consistent {
        return Ok(false);
    }
    let reach = reachability_from_coarsest(can);
    if !reach.all_reachable {
        return Ok(false);
    }
    let expected: usize = reach
        .roots
        .iter()
        .map(|&id| can.nodes[can.position(id).expect("root is a node")].dim)
        .sum();
    Ok(kernel_multiplicity(can, KERNEL_EIG_TOL)? == expected)
}

/// Composite embeddings `V_{iN}` from the coarsest node of a connected CAN,
/// in node order. Every oriented path must give the same composite.
pub fn composite_maps(can: &CanSpec) -> Result<Vec<DMatrix<f64>>> {
    if can.is_empty() {
        return Ok(Vec::new());
    }
    if !can.is_connected() {
        return Err(CanError::UnsupportedTopology("CAN is not connected".into()));
    }
    let reach = reachability_from_coarsest(can);
    if !reach.all_reachable {
        return Err(CanError::UnsupportedTopology(format!(
            "nodes {:?} are not reachable from the coarsest node",
            reach.unreachable
        )));
    }
    let inc = can.incident_edges();
    let root = can.len() - 1;
    let h = can.nodes[root].dim;
    let mut maps: Vec<Option<DMatrix<f64>>> = vec![None; can.len()];
    maps[root] = Some(DMatrix::identity(h, h));
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        let mu = maps[u].clone().expect("queued nodes have maps");
        for &e in &inc[u] {
            let (f, c) = can.ends[e];
            if c != u {
                continue;
            }
            let cand = &can.edges[e].clca.weights * &mu;
            match &maps[f] {
                Some(existing) => {
                    let deviation = (existing - &cand).norm();
                    if deviation > PATH_CONSISTENCY_TOL {
                        return Err(CanError::InconsistentPaths {
                            node: can.nodes[f].id,
                            deviation,
                        });
                    }
                }
                None => {
                    maps[f] = Some(cand);
                    queue.push_back(f);
                }
            }
        }
    }
    Ok(maps
        .into_iter()
        .map(|m| m.expect("all nodes reachable"))
        .collect())
}

/// `χ_i = push(V_{iN}, χ_N)` for every node, in node order.
pub fn generate_global_section(
    can: &CanSpec,
    coarsest: &GaussianMeasure,
) -> Result<Vec<GaussianMeasure>> {
    let report = check_consistency(can, STIEFEL_TOL);
    if !report.consistent {
        return Err(CanError::UnsupportedTopology(
            "CAN is not consistent".into(),
        ));
    }
    let h = can.nodes.last().map_or(0, |n| n.dim);
    if coarsest.dim() != h {
        return Err(CanError::DimensionMismatch {
            expected: h,
            got: coarsest.dim(),
            context: "coarsest measure",
        });
    }
    let maps = composite_maps(can)?;
    Ok(maps
        .iter()
        .map(|m| GaussianMeasure::from_psd(m * coarsest.cov() * m.transpose()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeSmoothness {
    pub fine: usize,
    pub coarse: usize,
    /// Infinite when the supports are not comparable.
    pub value: f64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessReport {
    pub total: f64,
    pub edges: Vec<EdgeSmoothness>,
}

/// Sum over edges of the divergence between the abstracted fine measure and
/// the coarse measure. `measures` are in node order.
pub fn smoothness(can: &CanSpec, measures: &[GaussianMeasure]) -> Result<SmoothnessReport> {
    if measures.len() != can.len() {
        return Err(CanError::DimensionMismatch {
            expected: can.len(),
            got: measures.len(),
            context: "one measure per node",
        });
    }
    if !check_consistency(can, STIEFEL_TOL).consistent {
        log::warn!("smoothness evaluated on an inconsistent CAN");
    }
    let mut edges = Vec::with_capacity(can.edges.len());
    for (e, &(f, c)) in can.edges.iter().zip(&can.ends) {
        let (value, diagnostic) =
            match kl_gaussian_abstracted(&e.clca.abstraction(), &measures[f], &measures[c]) {
                Ok(v) => (v, None),
                Err(CanError::SupportMismatch(msg)) => (f64::INFINITY, Some(msg)),
                Err(err) => return Err(err),
            };
        edges.push(EdgeSmoothness {
            fine: e.fine,
            coarse: e.coarse,
            value,
            diagnostic,
        });
    }
    Ok(SmoothnessReport {
        total: edges.iter().map(|e| e.value).sum(),
        edges,
    })
}
