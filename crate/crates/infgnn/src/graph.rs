//! Dynamic spatio-temporal graph data model and graph utilities.
//!
//! A sequence of time intervals, each carrying an undirected weighted graph
//! over the entities alive in that interval plus a node-aligned feature
//! tensor. Node identities are stable across the whole sequence: an entity
//! that persists from one interval to the next keeps its id, which is what
//! makes churn computation and induced persisting subgraphs meaningful.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable entity identity, unique across the sequence lifetime.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct NodeId(pub u64);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Undirected weighted graph for one time interval.
///
/// The adjacency matrix is indexed by `node_order`; it is symmetric with a
/// zero diagonal, and an entry is positive iff the corresponding edge exists.
#[derive(Debug, Clone)]
pub struct IntervalGraph {
    interval_index: usize,
    node_order: Vec<NodeId>,
    index_of: BTreeMap<NodeId, usize>,
    adjacency: Array2<f64>,
}

impl IntervalGraph {
    /// Build from an explicit node ordering and an undirected edge list.
    ///
    /// Listing an edge in both directions is accepted as long as the weights
    /// agree; conflicting duplicate weights are a validation error.
    pub fn from_edges(
        interval_index: usize,
        nodes: Vec<NodeId>,
        edges: &[(NodeId, NodeId, f64)],
    ) -> Result<Self> {
        let mut index_of = BTreeMap::new();
        for (i, &n) in nodes.iter().enumerate() {
            if index_of.insert(n, i).is_some() {
                return Err(Error::Validation(format!(
                    "interval {interval_index}: duplicate node id {n}"
                )));
            }
        }
        let n = nodes.len();
        let mut adjacency = Array2::zeros((n, n));
        for &(a, b, w) in edges {
            let (&ia, &ib) = match (index_of.get(&a), index_of.get(&b)) {
                (Some(ia), Some(ib)) => (ia, ib),
                _ => {
                    return Err(Error::Validation(format!(
                        "interval {interval_index}: edge ({a},{b}) references unknown node"
                    )))
                }
            };
            if a == b {
                return Err(Error::Validation(format!(
                    "interval {interval_index}: self-loop on node {a}"
                )));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Validation(format!(
                    "interval {interval_index}: edge ({a},{b}) has non-positive weight {w}"
                )));
            }
            let prev = adjacency[[ia, ib]];
            if prev != 0.0 && prev != w {
                return Err(Error::Validation(format!(
                    "interval {interval_index}: adjacency not symmetric at edge ({a},{b}): {prev} vs {w}"
                )));
            }
            adjacency[[ia, ib]] = w;
            adjacency[[ib, ia]] = w;
        }
        Ok(Self {
            interval_index,
            node_order: nodes,
            index_of,
            adjacency,
        })
    }

    /// Build from a full adjacency matrix, validating symmetry, the zero
    /// diagonal, and nonnegativity.
    pub fn from_adjacency(
        interval_index: usize,
        nodes: Vec<NodeId>,
        adjacency: Array2<f64>,
    ) -> Result<Self> {
        let n = nodes.len();
        if adjacency.nrows() != n || adjacency.ncols() != n {
            return Err(Error::Validation(format!(
                "interval {interval_index}: adjacency is {}x{} but {} nodes declared",
                adjacency.nrows(),
                adjacency.ncols(),
                n
            )));
        }
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::Validation(format!(
                    "interval {interval_index}: nonzero diagonal at node {}",
                    nodes[i]
                )));
            }
            for j in 0..i {
                let w = adjacency[[i, j]];
                if w != adjacency[[j, i]] {
                    return Err(Error::Validation(format!(
                        "interval {interval_index}: adjacency not symmetric at ({},{})",
                        nodes[i], nodes[j]
                    )));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Validation(format!(
                        "interval {interval_index}: bad weight {w} at ({},{})",
                        nodes[i], nodes[j]
                    )));
                }
            }
        }
        let mut index_of = BTreeMap::new();
        for (i, &node) in nodes.iter().enumerate() {
            if index_of.insert(node, i).is_some() {
                return Err(Error::Validation(format!(
                    "interval {interval_index}: duplicate node id {node}"
                )));
            }
        }
        Ok(Self {
            interval_index,
            node_order: nodes,
            index_of,
            adjacency,
        })
    }

    pub fn interval_index(&self) -> usize {
        self.interval_index
    }

    pub fn node_count(&self) -> usize {
        self.node_order.len()
    }

    /// The fixed node ordering that aligns adjacency rows and feature rows.
    pub fn node_order(&self) -> &[NodeId] {
        &self.node_order
    }

    pub fn node_set(&self) -> BTreeSet<NodeId> {
        self.node_order.iter().copied().collect()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.index_of.contains_key(&v)
    }

    pub fn index_of(&self, v: NodeId) -> Option<usize> {
        self.index_of.get(&v).copied()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn edge_weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        let w = self.adjacency[[ia, ib]];
        (w > 0.0).then_some(w)
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.edge_weight(a, b).is_some()
    }

    /// Undirected edges as (low, high, weight), ordered by node id.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, f64)> {
        let mut out = Vec::new();
        let mut sorted: Vec<NodeId> = self.node_order.clone();
        sorted.sort_unstable();
        for (ai, &a) in sorted.iter().enumerate() {
            for &b in &sorted[ai + 1..] {
                if let Some(w) = self.edge_weight(a, b) {
                    out.push((a, b, w));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        let mut count = 0;
        let n = self.node_count();
        for i in 0..n {
            for j in 0..i {
                if self.adjacency[[i, j]] > 0.0 {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn neighbors(&self, v: NodeId) -> Vec<NodeId> {
        match self.index_of(v) {
            None => Vec::new(),
            Some(iv) => self
                .node_order
                .iter()
                .enumerate()
                .filter(|&(j, _)| self.adjacency[[iv, j]] > 0.0)
                .map(|(_, &u)| u)
                .collect(),
        }
    }
}

/// Per-interval feature tensor of shape nodes x features x timestamps,
/// row-aligned with an [`IntervalGraph`]'s node ordering.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    values: Array3<f64>,
    node_order: Vec<NodeId>,
    index_of: BTreeMap<NodeId, usize>,
}

impl FeatureTensor {
    pub fn new(values: Array3<f64>, node_order: Vec<NodeId>) -> Result<Self> {
        if values.shape()[0] != node_order.len() {
            return Err(Error::Validation(format!(
                "feature tensor has {} rows but {} nodes in ordering",
                values.shape()[0],
                node_order.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "feature tensor contains non-finite values".into(),
            ));
        }
        let index_of = node_order
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        Ok(Self {
            values,
            node_order,
            index_of,
        })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn node_order(&self) -> &[NodeId] {
        &self.node_order
    }

    pub fn feature_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[2]
    }

    /// One node's features x timestamps slice.
    pub fn series(&self, v: NodeId) -> Option<ArrayView2<'_, f64>> {
        let iv = *self.index_of.get(&v)?;
        Some(self.values.index_axis(ndarray::Axis(0), iv))
    }

    /// One node's series flattened over the feature axis, timestamp-major.
    pub fn flat_series(&self, v: NodeId) -> Option<Vec<f64>> {
        Some(self.series(v)?.iter().copied().collect())
    }
}

/// Ordered per-interval (graph, features) pairs for the whole horizon.
#[derive(Debug, Clone)]
pub struct DynamicGraphSequence {
    intervals: Vec<(IntervalGraph, FeatureTensor)>,
}

impl DynamicGraphSequence {
    pub fn new(intervals: Vec<(IntervalGraph, FeatureTensor)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Validation("sequence has no intervals".into()));
        }
        for w in intervals.windows(2) {
            let (a, b) = (&w[0].0, &w[1].0);
            if b.interval_index() <= a.interval_index() {
                return Err(Error::Validation(format!(
                    "interval indices not strictly increasing: {} then {}",
                    a.interval_index(),
                    b.interval_index()
                )));
            }
            let persisting = a.node_set().intersection(&b.node_set()).count();
            if persisting == 0 {
                return Err(Error::Validation(format!(
                    "intervals {} and {} share no persisting nodes",
                    a.interval_index(),
                    b.interval_index()
                )));
            }
        }
        for (g, x) in &intervals {
            if g.node_order() != x.node_order() {
                return Err(Error::Validation(format!(
                    "interval {}: graph and feature node orderings differ",
                    g.interval_index()
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn interval(&self, t: usize) -> &(IntervalGraph, FeatureTensor) {
        &self.intervals[t]
    }

    pub fn intervals(&self) -> &[(IntervalGraph, FeatureTensor)] {
        &self.intervals
    }

    pub fn feature_dim(&self) -> usize {
        self.intervals[0].1.feature_dim()
    }
}

/// Node turnover between two consecutive interval graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Churn {
    pub persisting: BTreeSet<NodeId>,
    pub added: BTreeSet<NodeId>,
    pub removed: BTreeSet<NodeId>,
}

/// Partition the two node sets into persisting, added, and removed nodes.
pub fn node_churn(prev: &IntervalGraph, curr: &IntervalGraph) -> Churn {
    let vp = prev.node_set();
    let vc = curr.node_set();
    Churn {
        persisting: vp.intersection(&vc).copied().collect(),
        added: vc.difference(&vp).copied().collect(),
        removed: vp.difference(&vc).copied().collect(),
    }
}

/// All nodes at shortest-path distance 1..k from `v`, excluding `v` itself.
pub fn k_hop_neighbors(g: &IntervalGraph, v: NodeId, k: usize) -> Result<BTreeSet<NodeId>> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if !g.contains(v) {
        return Err(Error::Argument(format!("node {v} not in graph")));
    }
    let mut seen = BTreeSet::new();
    let mut frontier = VecDeque::new();
    frontier.push_back((v, 0usize));
    seen.insert(v);
    let mut out = BTreeSet::new();
    while let Some((u, dist)) = frontier.pop_front() {
        if dist == k {
            continue;
        }
        for w in g.neighbors(u) {
            if seen.insert(w) {
                out.insert(w);
                frontier.push_back((w, dist + 1));
            }
        }
    }
    Ok(out)
}

/// Subgraph induced by `keep`: kept nodes, and the edges of `g` with both
/// endpoints kept. Node ordering follows `g`'s ordering restricted to `keep`.
pub fn induced_subgraph(g: &IntervalGraph, keep: &BTreeSet<NodeId>) -> Result<IntervalGraph> {
    for &v in keep {
        if !g.contains(v) {
            return Err(Error::Argument(format!(
                "induced_subgraph: node {v} not in graph"
            )));
        }
    }
    let nodes: Vec<NodeId> = g
        .node_order()
        .iter()
        .copied()
        .filter(|v| keep.contains(v))
        .collect();
    let n = nodes.len();
    let mut adjacency = Array2::zeros((n, n));
    for (i, &a) in nodes.iter().enumerate() {
        for (j, &b) in nodes.iter().enumerate().skip(i + 1) {
            if let Some(w) = g.edge_weight(a, b) {
                adjacency[[i, j]] = w;
                adjacency[[j, i]] = w;
            }
        }
    }
    IntervalGraph::from_adjacency(g.interval_index(), nodes, adjacency)
}
