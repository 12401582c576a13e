//! JSON documents for CANs and generated instances. Matrices are nested
//! arrays in row-major order.

use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::generate::{CanInstance, LocalInstance, Topology};
use crate::abstraction::{Clca, StructureMatrix};
use crate::can_graph::{CanSpec, Edge, Node};
use crate::error::{CanError, Result};
use crate::numerics::GaussianMeasure;
use crate::search::{empty_relation, lower_pairs};

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Rejects ragged input; `path` names the field in the error.
pub fn from_rows(rows: &Rows, path: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().position(|r| r.len() != ncols) {
        return Err(schema(
            format!("{path}[{r}]"),
            format!("row has {} entries, expected {ncols}", rows[r].len()),
        ));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn schema(path: String, message: impl Into<String>) -> CanError {
    CanError::Schema {
        path,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub fine: usize,
    pub coarse: usize,
    pub structure: Rows,
    pub weights: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanDoc {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
}

/// Structure of one node pair, by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStructureDoc {
    pub coarse: usize,
    pub fine: usize,
    pub structure: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanInstanceDoc {
    pub topology: Topology,
    pub seed: u64,
    pub can: CanDoc,
    pub structures: Vec<PairStructureDoc>,
    /// `[coarse id, fine id]` pairs of the true relation.
    pub truth_closure: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalInstanceDoc {
    pub ell: usize,
    pub h: usize,
    pub seed: u64,
    pub sigma_l: Rows,
    pub sigma_h: Rows,
    pub structure: Rows,
    pub weights: Rows,
}

pub fn can_to_doc(can: &CanSpec) -> CanDoc {
    CanDoc {
        nodes: can
            .nodes()
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                dim: n.dim,
                cov: n.measure.as_ref().map(|m| to_rows(m.cov())),
            })
            .collect(),
        edges: can
            .edges()
            .iter()
            .map(|e| EdgeDoc {
                fine: e.fine,
                coarse: e.coarse,
                structure: to_rows(e.clca.structure.as_matrix()),
                weights: to_rows(&e.clca.weights),
            })
            .collect(),
    }
}

/// Builds the CAN. Maps are not required to be valid CLCAs so that
/// inconsistent networks can be loaded and diagnosed.
pub fn can_from_doc(doc: &CanDoc) -> Result<CanSpec> {
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for (k, n) in doc.nodes.iter().enumerate() {
        let measure = match &n.cov {
            Some(rows) => {
                let path = format!("nodes[{k}].cov");
                let m = from_rows(rows, &path)?;
                if m.shape() != (n.dim, n.dim) {
                    return Err(schema(
                        path,
                        format!("expected {0}x{0}, got {1}x{2}", n.dim, m.nrows(), m.ncols()),
                    ));
                }
                Some(GaussianMeasure::new(m).map_err(|e| schema(path, e.to_string()))?)
            }
            None => None,
        };
        nodes.push(Node {
            id: n.id,
            dim: n.dim,
            measure,
        });
    }
    let mut edges = Vec::with_capacity(doc.edges.len());
    for (k, e) in doc.edges.iter().enumerate() {
        let s_path = format!("edges[{k}].structure");
        let b = StructureMatrix::from_raw(from_rows(&e.structure, &s_path)?)
            .map_err(|err| schema(s_path.clone(), err.to_string()))?;
        let w = from_rows(&e.weights, &format!("edges[{k}].weights"))?;
        if b.shape() != w.shape() {
            return Err(schema(
                s_path,
                format!("shape {:?} differs from weights {:?}", b.shape(), w.shape()),
            ));
        }
        edges.push(Edge {
            fine: e.fine,
            coarse: e.coarse,
            clca: Clca::new_unchecked(b, w),
        });
    }
    CanSpec::new(nodes, edges)
}

pub fn can_instance_to_doc(inst: &CanInstance) -> CanInstanceDoc {
    let id = |p: usize| inst.can.nodes()[p].id;
    CanInstanceDoc {
        topology: inst.topology,
        seed: inst.seed,
        can: can_to_doc(&inst.can),
        structures: inst
            .structures
            .iter()
            .map(|(&(i, j), s)| PairStructureDoc {
                coarse: id(i),
                fine: id(j),
                structure: to_rows(s.as_matrix()),
            })
            .collect(),
        truth_closure: lower_pairs(&inst.truth_closure)
            .into_iter()
            .map(|(i, j)| [id(i), id(j)])
            .collect(),
    }
}

/// Parsed instance document. Positions follow the CAN's node order.
#[derive(Debug, Clone)]
pub struct LoadedCanInstance {
    pub topology: Topology,
    pub seed: u64,
    pub can: CanSpec,
    pub structures: std::collections::BTreeMap<(usize, usize), StructureMatrix>,
    pub truth_closure: crate::search::Relation,
}

pub fn can_instance_from_doc(doc: &CanInstanceDoc) -> Result<LoadedCanInstance> {
    let can = can_from_doc(&doc.can)?;
    let pos = |id: usize, path: String| {
        can.position(id)
            .ok_or_else(|| schema(path, format!("unknown node id {id}")))
    };
    let mut structures = std::collections::BTreeMap::new();
    for (k, s) in doc.structures.iter().enumerate() {
        let i = pos(s.coarse, format!("structures[{k}].coarse"))?;
        let j = pos(s.fine, format!("structures[{k}].fine"))?;
        let path = format!("structures[{k}].structure");
        let b = StructureMatrix::try_new(from_rows(&s.structure, &path)?)
            .map_err(|e| schema(path.clone(), e.to_string()))?;
        let want = (can.nodes()[j].dim, can.nodes()[i].dim);
        if i <= j || b.shape() != want {
            return Err(schema(
                path,
                format!("expected a {want:?} structure from a finer to a coarser node"),
            ));
        }
        structures.insert((i, j), b);
    }
    let mut truth_closure = empty_relation(can.len());
    for (k, &[c, f]) in doc.truth_closure.iter().enumerate() {
        let i = pos(c, format!("truth_closure[{k}][0]"))?;
        let j = pos(f, format!("truth_closure[{k}][1]"))?;
        truth_closure[i][j] = true;
    }
    Ok(LoadedCanInstance {
        topology: doc.topology,
        seed: doc.seed,
        can,
        structures,
        truth_closure,
    })
}

pub fn local_instance_to_doc(inst: &LocalInstance) -> LocalInstanceDoc {
    LocalInstanceDoc {
        ell: inst.ell,
        h: inst.h,
        seed: inst.seed,
        sigma_l: to_rows(inst.sigma_l.cov()),
        sigma_h: to_rows(inst.sigma_h.cov()),
        structure: to_rows(inst.truth.structure.as_matrix()),
        weights: to_rows(&inst.truth.weights),
    }
}

/// Parses JSON into `T`. Unknown fields are logged and skipped; type and
/// missing-field errors carry the path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut unknown = Vec::new();
    let mut record = |p: serde_ignored::Path<'_>| unknown.push(p.to_string());
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T =
        serde_path_to_error::deserialize(serde_ignored::Deserializer::new(&mut de, &mut record))
            .map_err(|e| schema(e.path().to_string(), e.inner().to_string()))?;
    de.end().map_err(|e| schema(".".into(), e.to_string()))?;
    for p in unknown {
        log::warn!("ignoring unknown field `{p}`");
    }
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&std::fs::read_to_string(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CanError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn serialize_can(can: &CanSpec) -> Result<String> {
    serde_json::to_string_pretty(&can_to_doc(can)).map_err(|e| CanError::Internal(e.to_string()))
}

pub fn deserialize_can(text: &str) -> Result<CanSpec> {
    can_from_doc(&parse_json(text)?)
}
