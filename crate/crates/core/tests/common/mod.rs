//! Random CAN builders shared by the integration tests.
#![allow(dead_code)]

use can_core::abstraction::{Clca, StructureMatrix};
use can_core::can_graph::{CanSpec, Edge, Node};
use can_core::numerics::random_stiefel;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Nodes with ids `1..=n` for dims already sorted descending.
pub fn nodes(dims: &[usize]) -> Vec<Node> {
    dims.iter()
        .enumerate()
        .map(|(k, &dim)| Node {
            id: k + 1,
            dim,
            measure: None,
        })
        .collect()
}

/// Edge between positions with a masked Stiefel map, or masked Gaussian
/// weights when `stiefel` is false.
pub fn edge(
    dims: &[usize],
    fine: usize,
    coarse: usize,
    stiefel: bool,
    rng: &mut ChaCha8Rng,
) -> Edge {
    let (df, dc) = (dims[fine], dims[coarse]);
    let b = StructureMatrix::random(df, dc, rng).unwrap();
    let w = if stiefel {
        random_stiefel(df, dc, Some(&b), rng).unwrap().into_inner()
    } else {
        gaussian(df, dc, rng).component_mul(b.as_matrix())
    };
    Edge {
        fine: fine + 1,
        coarse: coarse + 1,
        clca: Clca::new_unchecked(b, w),
    }
}

/// Sorted (descending) dims drawn from `[lo, hi]`.
pub fn dims(n: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut d: Vec<usize> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    d.sort_unstable_by(|a, b| b.cmp(a));
    d
}

/// `n` strictly decreasing dims drawn from `[lo, hi]`.
pub fn distinct_dims(n: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (lo..=hi).collect();
    pool.shuffle(rng);
    let mut d = pool[..n].to_vec();
    d.sort_unstable_by(|a, b| b.cmp(a));
    d
}

/// Random DAG: every pair is an edge with probability `p`.
pub fn random_dag(dims: &[usize], p: f64, stiefel: bool, rng: &mut ChaCha8Rng) -> CanSpec {
    let mut edges = Vec::new();
    for c in 1..dims.len() {
        for f in 0..c {
            if rng.random_bool(p) {
                edges.push(edge(dims, f, c, stiefel, rng));
            }
        }
    }
    CanSpec::new(nodes(dims), edges).unwrap()
}

/// Uniformly grown random tree; orientation follows the dims, so some nodes
/// may be unreachable from the coarsest one.
pub fn random_tree(dims: &[usize], rng: &mut ChaCha8Rng) -> CanSpec {
    let mut order: Vec<usize> = (0..dims.len()).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for k in 1..order.len() {
        let (a, b) = (order[k], order[rng.random_range(0..k)]);
        edges.push(edge(dims, a.min(b), a.max(b), true, rng));
    }
    CanSpec::new(nodes(dims), edges).unwrap()
}

/// The four-node example: 1 → 2, 2 → 3, 2 → 4 with dims 6, 5, 3, 2.
pub fn four_node_example(rng: &mut ChaCha8Rng) -> CanSpec {
    let dims = [6, 5, 3, 2];
    let edges = vec![
        edge(&dims, 0, 1, true, rng),
        edge(&dims, 1, 2, true, rng),
        edge(&dims, 1, 3, true, rng),
    ];
    CanSpec::new(nodes(&dims), edges).unwrap()
}
