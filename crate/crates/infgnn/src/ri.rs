//! Relation Importance scoring, informative-subgraph selection, and
//! neighbors merging for newly appeared nodes.
//!
//! A node's RI combines temporal stability (divergence of the node against
//! itself across the interval transition, in the numerator) with spatial
//! informativeness (divergence against each neighbor in both intervals, in
//! the denominator). Low scores mark nodes that are stable over time yet
//! distinct from their neighborhood; the informative subgraph is the induced
//! subgraph over the lowest-scoring persisting nodes, which provably
//! minimizes the RI sum among equal-size induced subgraphs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::distrib::jsd_between_samples;
use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, k_hop_neighbors, node_churn, FeatureTensor, IntervalGraph, NodeId};

/// Floor applied to each denominator divergence before dividing, so that a
/// node indistinguishable from its neighbors is penalized heavily instead of
/// dividing by zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Sentinel score for persisting nodes with no persisting neighbor; ranks
/// them last while keeping every score finite.
pub const NO_NEIGHBOR_SENTINEL: f64 = f64::MAX;

/// Per-node Relation Importance scores for one interval transition.
#[derive(Debug, Clone)]
pub struct RiScoreTable {
    pub interval_pair: (usize, usize),
    /// Defined exactly on the persisting-node intersection.
    pub scores: BTreeMap<NodeId, f64>,
    /// Neighborhood radius the scores were computed with.
    pub k: usize,
}

/// Pairwise divergences backing an RI evaluation.
///
/// Kept as an explicit intermediate so scores can be recomputed under a
/// rescaling of the divergence layer (the RI ranking must not move).
#[derive(Debug, Clone)]
pub struct DivergenceCache {
    /// JSD of each persisting node against itself across the transition.
    pub temporal: BTreeMap<NodeId, f64>,
    /// JSD between node pairs in the current interval, keyed (low, high).
    pub cross_curr: BTreeMap<(NodeId, NodeId), f64>,
    /// JSD between node pairs in the previous interval, keyed (low, high).
    pub cross_prev: BTreeMap<(NodeId, NodeId), f64>,
}

fn pair_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// k-hop neighborhoods evaluated on the current graph, restricted to nodes
/// persisting from the previous interval.
pub fn persisting_neighborhoods(
    g_prev: &IntervalGraph,
    g_curr: &IntervalGraph,
    k: usize,
) -> Result<BTreeMap<NodeId, Vec<NodeId>>> {
    let persisting = node_churn(g_prev, g_curr).persisting;
    let mut out = BTreeMap::new();
    for &v in &persisting {
        let hood: Vec<NodeId> = k_hop_neighbors(g_curr, v, k)?
            .into_iter()
            .filter(|u| persisting.contains(u))
            .collect();
        out.insert(v, hood);
    }
    Ok(out)
}

/// Compute every divergence needed to score the given neighborhoods.
pub fn divergence_cache(
    neighborhoods: &BTreeMap<NodeId, Vec<NodeId>>,
    x_prev: &FeatureTensor,
    x_curr: &FeatureTensor,
    bins: usize,
) -> Result<DivergenceCache> {
    let series = |x: &FeatureTensor, v: NodeId| -> Result<Vec<f64>> {
        x.flat_series(v)
            .ok_or_else(|| Error::Argument(format!("node {v} has no feature series")))
    };
    let mut temporal = BTreeMap::new();
    for &v in neighborhoods.keys() {
        let d = jsd_between_samples(&series(x_prev, v)?, &series(x_curr, v)?, bins)?;
        temporal.insert(v, d);
    }
    let mut cross_curr = BTreeMap::new();
    let mut cross_prev = BTreeMap::new();
    for (&v, hood) in neighborhoods {
        for &u in hood {
            let key = pair_key(u, v);
            if !cross_curr.contains_key(&key) {
                let d = jsd_between_samples(&series(x_curr, u)?, &series(x_curr, v)?, bins)?;
                cross_curr.insert(key, d);
            }
            if !cross_prev.contains_key(&key) {
                let d = jsd_between_samples(&series(x_prev, u)?, &series(x_prev, v)?, bins)?;
                cross_prev.insert(key, d);
            }
        }
    }
    Ok(DivergenceCache {
        temporal,
        cross_curr,
        cross_prev,
    })
}

/// Combine cached divergences into per-node RI scores.
pub fn ri_from_divergences(
    cache: &DivergenceCache,
    neighborhoods: &BTreeMap<NodeId, Vec<NodeId>>,
) -> BTreeMap<NodeId, f64> {
    let mut scores = BTreeMap::new();
    for (&v, hood) in neighborhoods {
        if hood.is_empty() {
            scores.insert(v, NO_NEIGHBOR_SENTINEL);
            continue;
        }
        let t_v = cache.temporal[&v];
        let mut sum = 0.0;
        for &u in hood {
            let key = pair_key(u, v);
            let numer = cache.temporal[&u] * t_v;
            let denom = cache.cross_curr[&key].max(DENOMINATOR_FLOOR)
                * cache.cross_prev[&key].max(DENOMINATOR_FLOOR);
            sum += numer / denom;
        }
        scores.insert(v, sum);
    }
    scores
}

/// Score all persisting nodes for the transition between two intervals.
pub fn ri_scores(
    g_prev: &IntervalGraph,
    g_curr: &IntervalGraph,
    x_prev: &FeatureTensor,
    x_curr: &FeatureTensor,
    k: usize,
    bins: usize,
) -> Result<RiScoreTable> {
    let neighborhoods = persisting_neighborhoods(g_prev, g_curr, k)?;
    let cache = divergence_cache(&neighborhoods, x_prev, x_curr, bins)?;
    Ok(RiScoreTable {
        interval_pair: (g_prev.interval_index(), g_curr.interval_index()),
        scores: ri_from_divergences(&cache, &neighborhoods),
        k,
    })
}

/// Relation Importance of a single persisting node.
pub fn relation_importance(
    v: NodeId,
    g_prev: &IntervalGraph,
    g_curr: &IntervalGraph,
    x_prev: &FeatureTensor,
    x_curr: &FeatureTensor,
    k: usize,
    bins: usize,
) -> Result<f64> {
    if !g_prev.contains(v) || !g_curr.contains(v) {
        return Err(Error::Argument(format!(
            "node {v} does not persist across the transition"
        )));
    }
    let table = ri_scores(g_prev, g_curr, x_prev, x_curr, k, bins)?;
    Ok(table.scores[&v])
}

/// Pick the lowest-RI persisting nodes and induce their subgraph on the
/// edges present in both intervals.
///
/// The subgraph size is `max(1, floor(fraction * N_t))`, capped by the
/// number of persisting nodes; ties in score break by ascending node id.
pub fn select_informative_subgraph(
    table: &RiScoreTable,
    g_prev: &IntervalGraph,
    g_curr: &IntervalGraph,
    fraction: f64,
) -> Result<(BTreeSet<NodeId>, IntervalGraph)> {
    if table.scores.is_empty() {
        return Err(Error::Argument("RI table domain is empty".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "subgraph fraction {fraction} outside (0, 1]"
        )));
    }
    let target = ((fraction * g_curr.node_count() as f64).floor() as usize).max(1);
    let n_if = target.min(table.scores.len());
    let mut ranked: Vec<(NodeId, f64)> = table.scores.iter().map(|(&v, &s)| (v, s)).collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let selected: BTreeSet<NodeId> = ranked[..n_if].iter().map(|&(v, _)| v).collect();
    let graph = induce_persisting_subgraph(g_prev, g_curr, &selected)?;
    Ok((selected, graph))
}

/// Induce `keep` on the current graph, retaining only edges that also exist
/// in the previous graph. Weights come from the current interval.
pub fn induce_persisting_subgraph(
    g_prev: &IntervalGraph,
    g_curr: &IntervalGraph,
    keep: &BTreeSet<NodeId>,
) -> Result<IntervalGraph> {
    let curr_induced = induced_subgraph(g_curr, keep)?;
    let nodes = curr_induced.node_order().to_vec();
    let n = nodes.len();
    let mut adjacency = Array2::zeros((n, n));
    for (i, &a) in nodes.iter().enumerate() {
        for (j, &b) in nodes.iter().enumerate().skip(i + 1) {
            if let Some(w) = curr_induced.edge_weight(a, b) {
                if g_prev.has_edge(a, b) {
                    adjacency[[i, j]] = w;
                    adjacency[[j, i]] = w;
                }
            }
        }
    }
    IntervalGraph::from_adjacency(g_curr.interval_index(), nodes, adjacency)
}

/// Simulate the series of newly appeared nodes as the arithmetic mean of
/// their k-hop neighbors inside the informative subgraph, falling back to
/// the mean over all subgraph members when no such neighbor exists.
pub fn neighbors_merge(
    new_nodes: &BTreeSet<NodeId>,
    g_curr: &IntervalGraph,
    base_nodes: &BTreeSet<NodeId>,
    x_curr: &FeatureTensor,
    k: usize,
) -> Result<BTreeMap<NodeId, Array2<f64>>> {
    if base_nodes.is_empty() {
        return Err(Error::Argument("no base nodes to merge from".into()));
    }
    let mut out = BTreeMap::new();
    for &v in new_nodes {
        let hood: Vec<NodeId> = k_hop_neighbors(g_curr, v, k)?
            .into_iter()
            .filter(|u| base_nodes.contains(u))
            .collect();
        let sources: Vec<NodeId> = if hood.is_empty() {
            base_nodes.iter().copied().collect()
        } else {
            hood
        };
        let mut acc: Option<Array2<f64>> = None;
        for &u in &sources {
            let series = x_curr
                .series(u)
                .ok_or_else(|| Error::Argument(format!("node {u} has no feature series")))?
                .to_owned();
            acc = Some(match acc {
                None => series,
                Some(a) => a + series,
            });
        }
        let mean = acc.unwrap() / sources.len() as f64;
        out.insert(v, mean);
    }
    Ok(out)
}

/// Assemble the training graph for an interval: the informative subgraph's
/// nodes with their true series, plus each new node appended with its
/// simulated series and its true current-interval edges into the subgraph.
pub fn attach_new_nodes(
    subgraph: &IntervalGraph,
    g_curr: &IntervalGraph,
    x_curr: &FeatureTensor,
    simulated: &BTreeMap<NodeId, Array2<f64>>,
) -> Result<(IntervalGraph, FeatureTensor)> {
    let base: Vec<NodeId> = subgraph.node_order().to_vec();
    let mut nodes = base.clone();
    nodes.extend(simulated.keys().copied());
    let n = nodes.len();
    let nb = base.len();

    let mut adjacency = Array2::zeros((n, n));
    adjacency
        .slice_mut(ndarray::s![..nb, ..nb])
        .assign(subgraph.adjacency());
    for (offset, &v) in simulated.keys().enumerate() {
        let i = nb + offset;
        for (j, &u) in base.iter().enumerate() {
            if let Some(w) = g_curr.edge_weight(v, u) {
                adjacency[[i, j]] = w;
                adjacency[[j, i]] = w;
            }
        }
    }
    let graph = IntervalGraph::from_adjacency(g_curr.interval_index(), nodes.clone(), adjacency)?;

    let d = x_curr.feature_dim();
    let steps = x_curr.steps();
    let mut values = Array3::zeros((n, d, steps));
    for (i, &v) in base.iter().enumerate() {
        let series = x_curr
            .series(v)
            .ok_or_else(|| Error::Argument(format!("node {v} has no feature series")))?;
        values.index_axis_mut(Axis(0), i).assign(&series);
    }
    for (offset, series) in simulated.values().enumerate() {
        values.index_axis_mut(Axis(0), nb + offset).assign(series);
    }
    let features = FeatureTensor::new(values, nodes)?;
    Ok((graph, features))
}

/// Write a table as `node,score` rows.
pub fn write_ri_scores_csv(table: &RiScoreTable, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_record(["node", "score"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (node, score) in &table.scores {
        writer
            .write_record([node.0.to_string(), score.to_string()])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distrib::DEFAULT_BINS;
    use crate::synth::{generate_synthetic_drift, SynthConfig};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u64]) -> Vec<NodeId> {
        v.iter().copied().map(NodeId).collect()
    }

    fn tensor_from(rows: Vec<Vec<f64>>, nodes: Vec<NodeId>) -> FeatureTensor {
        let steps = rows[0].len();
        let mut values = Array3::zeros((rows.len(), 1, steps));
        for (i, row) in rows.iter().enumerate() {
            for (s, &v) in row.iter().enumerate() {
                values[[i, 0, s]] = v;
            }
        }
        FeatureTensor::new(values, nodes).unwrap()
    }

    fn random_series(rng: &mut ChaCha8Rng, steps: usize, base: f64, spread: f64) -> Vec<f64> {
        (0..steps).map(|_| base + rng.gen_range(-spread..spread)).collect()
    }

    /// Independent route: evaluate the RI sum for one node straight from the
    /// raw series, bypassing the cache machinery.
    fn brute_force_ri(
        v: NodeId,
        g_prev: &IntervalGraph,
        g_curr: &IntervalGraph,
        x_prev: &FeatureTensor,
        x_curr: &FeatureTensor,
        k: usize,
        bins: usize,
    ) -> f64 {
        let persisting = node_churn(g_prev, g_curr).persisting;
        let hood: Vec<NodeId> = k_hop_neighbors(g_curr, v, k)
            .unwrap()
            .into_iter()
            .filter(|u| persisting.contains(u))
            .collect();
        if hood.is_empty() {
            return NO_NEIGHBOR_SENTINEL;
        }
        let t = |x: &FeatureTensor, n: NodeId| x.flat_series(n).unwrap();
        let t_v = jsd_between_samples(&t(x_prev, v), &t(x_curr, v), bins).unwrap();
        hood.iter()
            .map(|&u| {
                let t_u = jsd_between_samples(&t(x_prev, u), &t(x_curr, u), bins).unwrap();
                let c_curr = jsd_between_samples(&t(x_curr, u), &t(x_curr, v), bins).unwrap();
                let c_prev = jsd_between_samples(&t(x_prev, u), &t(x_prev, v), bins).unwrap();
                t_u * t_v / (c_curr.max(DENOMINATOR_FLOOR) * c_prev.max(DENOMINATOR_FLOOR))
            })
            .sum()
    }

    /// Ring over six nodes with assorted stable and drifting series.
    fn six_node_fixture() -> (IntervalGraph, IntervalGraph, FeatureTensor, FeatureTensor) {
        let nodes = ids(&[0, 1, 2, 3, 4, 5]);
        let edges: Vec<(NodeId, NodeId, f64)> = (0..6u64)
            .map(|i| (NodeId(i), NodeId((i + 1) % 6), 1.0))
            .collect();
        let g_prev = IntervalGraph::from_edges(0, nodes.clone(), &edges).unwrap();
        let g_curr = IntervalGraph::from_edges(1, nodes.clone(), &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let steps = 64;
        let prev_rows: Vec<Vec<f64>> = (0..6)
            .map(|i| random_series(&mut rng, steps, 10.0 * i as f64, 2.0))
            .collect();
        let curr_rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                // Even nodes keep their process; odd nodes shift.
                let shift = if i % 2 == 0 { 0.0 } else { 6.0 };
                random_series(&mut rng, steps, 10.0 * i as f64 + shift, 2.0)
            })
            .collect();
        (
            g_prev,
            g_curr,
            tensor_from(prev_rows, nodes.clone()),
            tensor_from(curr_rows, nodes),
        )
    }

    #[test]
    fn matches_brute_force_on_fixture() {
        let (g_prev, g_curr, x_prev, x_curr) = six_node_fixture();
        for v in 0..6u64 {
            let got = relation_importance(
                NodeId(v),
                &g_prev,
                &g_curr,
                &x_prev,
                &x_curr,
                1,
                DEFAULT_BINS,
            )
            .unwrap();
            let want = brute_force_ri(
                NodeId(v),
                &g_prev,
                &g_curr,
                &x_prev,
                &x_curr,
                1,
                DEFAULT_BINS,
            );
            assert!(
                (got - want).abs() <= 1e-9 * want.max(1.0),
                "node {v}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn temporally_identical_node_scores_near_zero() {
        let nodes = ids(&[0, 1, 2]);
        let edges = [(NodeId(0), NodeId(1), 1.0), (NodeId(1), NodeId(2), 1.0)];
        let g_prev = IntervalGraph::from_edges(0, nodes.clone(), &edges).unwrap();
        let g_curr = IntervalGraph::from_edges(1, nodes.clone(), &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stable = random_series(&mut rng, 128, 0.0, 1.0);
        let prev = tensor_from(
            vec![
                stable.clone(),
                random_series(&mut rng, 128, 20.0, 1.0),
                random_series(&mut rng, 128, 40.0, 1.0),
            ],
            nodes.clone(),
        );
        let curr = tensor_from(
            vec![
                stable,
                random_series(&mut rng, 128, 25.0, 1.0),
                random_series(&mut rng, 128, 45.0, 1.0),
            ],
            nodes,
        );
        let score =
            relation_importance(NodeId(0), &g_prev, &g_curr, &prev, &curr, 1, DEFAULT_BINS)
                .unwrap();
        // Identical series across intervals: the numerator's own-node factor
        // is exactly zero, so the whole sum collapses.
        assert_eq!(score, 0.0);
    }

    #[test]
    fn indistinct_neighbor_blows_up_score() {
        let nodes = ids(&[0, 1]);
        let edges = [(NodeId(0), NodeId(1), 1.0)];
        let g_prev = IntervalGraph::from_edges(0, nodes.clone(), &edges).unwrap();
        let g_curr = IntervalGraph::from_edges(1, nodes.clone(), &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shared_prev = random_series(&mut rng, 128, 0.0, 1.0);
        let shared_curr = random_series(&mut rng, 128, 8.0, 1.0);
        // Both nodes always identical to each other, with real temporal drift.
        let prev = tensor_from(vec![shared_prev.clone(), shared_prev], nodes.clone());
        let curr = tensor_from(vec![shared_curr.clone(), shared_curr], nodes);
        let score =
            relation_importance(NodeId(0), &g_prev, &g_curr, &prev, &curr, 1, DEFAULT_BINS)
                .unwrap();
        // Denominators are floored, so the score is enormous but finite.
        assert!(score > 1e6);
        assert!(score.is_finite());
    }

    #[test]
    fn non_persisting_node_is_an_error() {
        let (g_prev, _, x_prev, x_curr) = six_node_fixture();
        let g_curr_small = IntervalGraph::from_edges(
            1,
            ids(&[0, 1, 2]),
            &[(NodeId(0), NodeId(1), 1.0), (NodeId(1), NodeId(2), 1.0)],
        )
        .unwrap();
        assert!(relation_importance(
            NodeId(5),
            &g_prev,
            &g_curr_small,
            &x_prev,
            &x_curr,
            1,
            DEFAULT_BINS
        )
        .is_err());
    }

    #[test]
    fn selection_orders_by_score_then_id() {
        let table = RiScoreTable {
            interval_pair: (0, 1),
            scores: [(NodeId(1), 0.1), (NodeId(2), 0.5), (NodeId(3), 0.2)]
                .into_iter()
                .collect(),
            k: 1,
        };
        let nodes = ids(&[1, 2, 3]);
        let edges = [(NodeId(1), NodeId(2), 1.0), (NodeId(2), NodeId(3), 1.0)];
        let g_prev = IntervalGraph::from_edges(0, nodes.clone(), &edges).unwrap();
        let g_curr = IntervalGraph::from_edges(1, nodes, &edges).unwrap();
        let (selected, _) =
            select_informative_subgraph(&table, &g_prev, &g_curr, 0.67).unwrap();
        assert_eq!(selected, [NodeId(1), NodeId(3)].into_iter().collect());

        let (all, sub) = select_informative_subgraph(&table, &g_prev, &g_curr, 1.0).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(sub.edge_count(), 2);
    }

    #[test]
    fn subgraph_keeps_only_shared_edges() {
        let nodes = ids(&[0, 1, 2]);
        let g_prev =
            IntervalGraph::from_edges(0, nodes.clone(), &[(NodeId(0), NodeId(1), 1.0)]).unwrap();
        let g_curr = IntervalGraph::from_edges(
            1,
            nodes,
            &[(NodeId(0), NodeId(1), 2.0), (NodeId(1), NodeId(2), 1.0)],
        )
        .unwrap();
        let keep: BTreeSet<NodeId> = [NodeId(0), NodeId(1), NodeId(2)].into_iter().collect();
        let sub = induce_persisting_subgraph(&g_prev, &g_curr, &keep).unwrap();
        // (1,2) is new this interval, so it is dropped; (0,1) keeps the
        // current interval's weight.
        assert_eq!(sub.edges(), vec![(NodeId(0), NodeId(1), 2.0)]);
    }

    /// Exhaustive oracle: the selected set minimizes the RI sum among all
    /// equal-cardinality subsets of the persisting nodes.
    #[test]
    fn selection_is_optimal_under_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..40 {
            let n = rng.gen_range(4..=8usize);
            let mut scores = BTreeMap::new();
            for v in 0..n as u64 {
                scores.insert(NodeId(v), rng.gen_range(0.0..5.0));
            }
            let table = RiScoreTable {
                interval_pair: (0, 1),
                scores: scores.clone(),
                k: 1,
            };
            let nodes: Vec<NodeId> = (0..n as u64).map(NodeId).collect();
            let mut edges = Vec::new();
            for i in 0..n as u64 {
                for j in 0..i {
                    if rng.gen_bool(0.4) {
                        edges.push((NodeId(i), NodeId(j), 1.0));
                    }
                }
            }
            let g_prev = IntervalGraph::from_edges(0, nodes.clone(), &edges).unwrap();
            let g_curr = IntervalGraph::from_edges(1, nodes, &edges).unwrap();
            let fraction = rng.gen_range(0.2..1.0);
            let (selected, _) =
                select_informative_subgraph(&table, &g_prev, &g_curr, fraction).unwrap();
            let size = selected.len();
            let selected_sum: f64 = selected.iter().map(|v| scores[v]).sum();

            // Enumerate all subsets of that size.
            let all: Vec<NodeId> = scores.keys().copied().collect();
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let sum: f64 = (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| scores[&all[i]])
                    .sum();
                best = best.min(sum);
            }
            assert!(
                selected_sum <= best + 1e-12,
                "trial {trial}: selected {selected_sum} vs best {best}"
            );
        }
    }

    /// Scaling every divergence by c > 0 leaves the ranking untouched.
    #[test]
    fn ranking_invariant_under_divergence_rescaling() {
        let (g_prev, g_curr, x_prev, x_curr) = six_node_fixture();
        let hoods = persisting_neighborhoods(&g_prev, &g_curr, 1).unwrap();
        let cache = divergence_cache(&hoods, &x_prev, &x_curr, DEFAULT_BINS).unwrap();
        let base = ri_from_divergences(&cache, &hoods);
        let argsort = |scores: &BTreeMap<NodeId, f64>| -> Vec<NodeId> {
            let mut v: Vec<(NodeId, f64)> = scores.iter().map(|(&n, &s)| (n, s)).collect();
            v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            v.into_iter().map(|(n, _)| n).collect()
        };
        for c in [0.5, 3.0, 17.0] {
            let scaled = DivergenceCache {
                temporal: cache.temporal.iter().map(|(&n, &d)| (n, c * d)).collect(),
                cross_curr: cache.cross_curr.iter().map(|(&k, &d)| (k, c * d)).collect(),
                cross_prev: cache.cross_prev.iter().map(|(&k, &d)| (k, c * d)).collect(),
            };
            let rescored = ri_from_divergences(&scaled, &hoods);
            assert_eq!(argsort(&base), argsort(&rescored), "c = {c}");
        }
    }

    #[test]
    fn merge_uses_neighbor_means() {
        let nodes = ids(&[0, 1, 2, 9]);
        let g_curr = IntervalGraph::from_edges(
            1,
            nodes.clone(),
            &[
                (NodeId(0), NodeId(1), 1.0),
                (NodeId(1), NodeId(2), 1.0),
                (NodeId(9), NodeId(0), 1.0),
                (NodeId(9), NodeId(1), 1.0),
            ],
        )
        .unwrap();
        let x_curr = tensor_from(
            vec![vec![10.0; 8], vec![20.0; 8], vec![70.0; 8], vec![0.0; 8]],
            nodes,
        );
        let base: BTreeSet<NodeId> = [NodeId(0), NodeId(1), NodeId(2)].into_iter().collect();
        let new: BTreeSet<NodeId> = [NodeId(9)].into_iter().collect();
        let sim = neighbors_merge(&new, &g_curr, &base, &x_curr, 1).unwrap();
        let series = &sim[&NodeId(9)];
        for s in 0..8 {
            assert_eq!(series[[0, s]], 15.0);
        }
    }

    #[test]
    fn merge_single_neighbor_copies_series() {
        let nodes = ids(&[0, 1, 9]);
        let g_curr = IntervalGraph::from_edges(
            1,
            nodes.clone(),
            &[(NodeId(0), NodeId(1), 1.0), (NodeId(9), NodeId(1), 1.0)],
        )
        .unwrap();
        let x_curr = tensor_from(vec![vec![3.0; 4], vec![7.0; 4], vec![0.0; 4]], nodes);
        let base: BTreeSet<NodeId> = [NodeId(0), NodeId(1)].into_iter().collect();
        let new: BTreeSet<NodeId> = [NodeId(9)].into_iter().collect();
        let sim = neighbors_merge(&new, &g_curr, &base, &x_curr, 1).unwrap();
        for s in 0..4 {
            assert_eq!(sim[&NodeId(9)][[0, s]], 7.0);
        }
    }

    #[test]
    fn merge_fallback_and_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // Node 9 attaches only to node 3, which is outside the base set, so
        // its simulation falls back to the subgraph-wide mean.
        let nodes = ids(&[0, 1, 2, 3, 9]);
        let g_curr = IntervalGraph::from_edges(
            1,
            nodes.clone(),
            &[
                (NodeId(0), NodeId(1), 1.0),
                (NodeId(1), NodeId(2), 1.0),
                (NodeId(2), NodeId(3), 1.0),
                (NodeId(9), NodeId(3), 1.0),
            ],
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| random_series(&mut rng, 16, 50.0, 20.0)).collect();
        let x_curr = tensor_from(rows.clone(), nodes);
        let base: BTreeSet<NodeId> = [NodeId(0), NodeId(1), NodeId(2)].into_iter().collect();
        let new: BTreeSet<NodeId> = [NodeId(9)].into_iter().collect();
        let sim = neighbors_merge(&new, &g_curr, &base, &x_curr, 1).unwrap();
        let series = &sim[&NodeId(9)];
        for s in 0..16 {
            let expected = (rows[0][s] + rows[1][s] + rows[2][s]) / 3.0;
            assert!((series[[0, s]] - expected).abs() < 1e-12);
            let lo = rows[0][s].min(rows[1][s]).min(rows[2][s]);
            let hi = rows[0][s].max(rows[1][s]).max(rows[2][s]);
            assert!(series[[0, s]] >= lo - 1e-12 && series[[0, s]] <= hi + 1e-12);
        }
    }

    #[test]
    fn attach_appends_nodes_with_true_edges() {
        let nodes = ids(&[0, 1, 2, 9]);
        let g_curr = IntervalGraph::from_edges(
            1,
            nodes.clone(),
            &[
                (NodeId(0), NodeId(1), 1.0),
                (NodeId(1), NodeId(2), 1.0),
                (NodeId(9), NodeId(1), 4.0),
            ],
        )
        .unwrap();
        let x_curr = tensor_from(
            vec![vec![1.0; 4], vec![2.0; 4], vec![3.0; 4], vec![0.0; 4]],
            nodes,
        );
        let base: BTreeSet<NodeId> = [NodeId(0), NodeId(1), NodeId(2)].into_iter().collect();
        let sub = induced_subgraph(&g_curr, &base).unwrap();
        let new: BTreeSet<NodeId> = [NodeId(9)].into_iter().collect();
        let sim = neighbors_merge(&new, &g_curr, &base, &x_curr, 1).unwrap();
        let (train_graph, train_x) = attach_new_nodes(&sub, &g_curr, &x_curr, &sim).unwrap();
        assert_eq!(train_graph.node_count(), 4);
        assert_eq!(train_graph.edge_weight(NodeId(9), NodeId(1)), Some(4.0));
        assert_eq!(train_graph.edge_weight(NodeId(9), NodeId(0)), None);
        // Base nodes keep their true series; the new node got the simulation.
        assert_eq!(train_x.flat_series(NodeId(2)).unwrap(), vec![3.0; 4]);
        assert_eq!(train_x.flat_series(NodeId(9)).unwrap(), vec![2.0; 4]);
    }

    /// Generator-flagged stable nodes should dominate the low-RI quantile.
    #[test]
    fn recovers_stable_nodes_on_synthetic_drift() {
        let cfg = SynthConfig {
            t_intervals: 2,
            initial_nodes: 40,
            growth: 5,
            steps_per_interval: 288,
            drift_strength: 1.0,
            stable_fraction: 0.3,
            ..Default::default()
        };
        let (seq, truth) = generate_synthetic_drift(&cfg, 41).unwrap();
        let (g0, x0) = seq.interval(0);
        let (g1, x1) = seq.interval(1);
        let table = ri_scores(g0, g1, x0, x1, 1, DEFAULT_BINS).unwrap();
        let quantile = truth.stable.len();
        let mut ranked: Vec<(NodeId, f64)> =
            table.scores.iter().map(|(&v, &s)| (v, s)).collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let bottom: BTreeSet<NodeId> = ranked[..quantile].iter().map(|&(v, _)| v).collect();
        let recovered = bottom.intersection(&truth.stable).count();
        assert!(
            recovered as f64 >= 0.8 * truth.stable.len() as f64,
            "recovered {recovered} of {}",
            truth.stable.len()
        );
    }
}
