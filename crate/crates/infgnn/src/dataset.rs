//! Canonical on-disk dataset layout: reader, writer, and validation.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/manifest.json          T, D, M, global node count, per-interval node lists
//! <root>/t<k>/edges.csv         src,dst,weight   (undirected, k = 0-based interval)
//! <root>/t<k>/features.csv      node,feature,step,value
//! ```
//!
//! Features may alternatively be a flat little-endian f64 binary
//! (`features.bin`) with a `features.json` sidecar declaring shape and
//! row-major order. The writer always emits CSV; both readers are supported.
//! PEMS-style per-year exports use the same schema, one directory per year.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicGraphSequence, FeatureTensor, IntervalGraph, NodeId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub t_intervals: usize,
    pub feature_dim: usize,
    pub steps_per_interval: usize,
    /// Size of the global stable id space (ids are not required to be dense).
    pub node_count: usize,
    /// Node ids alive in each interval, in adjacency order.
    pub interval_nodes: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureSidecar {
    shape: Vec<usize>,
    order: String,
    dtype: String,
}

fn interval_dir(root: &Path, t: usize) -> PathBuf {
    root.join(format!("t{t}"))
}

/// Load and fully validate a dataset directory.
pub fn load_dataset(root: &Path) -> Result<DynamicGraphSequence> {
    let manifest_path = root.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Format(format!(
            "missing or unreadable manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
    if manifest.interval_nodes.len() != manifest.t_intervals {
        return Err(Error::Validation(format!(
            "manifest declares {} intervals but lists nodes for {}",
            manifest.t_intervals,
            manifest.interval_nodes.len()
        )));
    }

    let mut intervals = Vec::with_capacity(manifest.t_intervals);
    for (t, node_ids) in manifest.interval_nodes.iter().enumerate() {
        let dir = interval_dir(root, t);
        let nodes: Vec<NodeId> = node_ids.iter().copied().map(NodeId).collect();
        let edges = load_edges_csv(&dir.join("edges.csv"), t)?;
        let graph = IntervalGraph::from_edges(t, nodes.clone(), &edges)?;

        let values = if dir.join("features.csv").exists() {
            load_features_csv(
                &dir.join("features.csv"),
                t,
                &nodes,
                manifest.feature_dim,
                manifest.steps_per_interval,
            )?
        } else if dir.join("features.bin").exists() {
            load_features_binary(
                &dir.join("features.bin"),
                &dir.join("features.json"),
                t,
                nodes.len(),
                manifest.feature_dim,
                manifest.steps_per_interval,
            )?
        } else {
            return Err(Error::Format(format!(
                "interval {t}: neither features.csv nor features.bin found in {}",
                dir.display()
            )));
        };
        let features = FeatureTensor::new(values, nodes)
            .map_err(|e| Error::Validation(format!("interval {t}: {e}")))?;
        intervals.push((graph, features));
    }
    DynamicGraphSequence::new(intervals)
}

fn load_edges_csv(path: &Path, t: usize) -> Result<Vec<(NodeId, NodeId, f64)>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("interval {t}: cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("interval {t}: bad edges header: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(Error::Format(format!(
            "interval {t}: edges.csv header must be src,dst,weight"
        )));
    }
    let mut edges = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Format(format!("interval {t}: bad edge row: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::Format(format!("interval {t}: short edge row {line}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("interval {t}: edge row {line}: {e}")))
        };
        let src = parse(0)? as u64;
        let dst = parse(1)? as u64;
        let weight = parse(2)?;
        edges.push((NodeId(src), NodeId(dst), weight));
    }
    Ok(edges)
}

fn load_features_csv(
    path: &Path,
    t: usize,
    nodes: &[NodeId],
    feature_dim: usize,
    steps: usize,
) -> Result<Array3<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("interval {t}: cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("interval {t}: bad features header: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != ["node", "feature", "step", "value"] {
        return Err(Error::Format(format!(
            "interval {t}: features.csv header must be node,feature,step,value"
        )));
    }
    let index_of: std::collections::BTreeMap<u64, usize> =
        nodes.iter().enumerate().map(|(i, n)| (n.0, i)).collect();
    let mut values = Array3::from_elem((nodes.len(), feature_dim, steps), f64::NAN);
    let mut filled = 0usize;
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Format(format!("interval {t}: bad feature row: {e}")))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Format(format!("interval {t}: short feature row")))
        };
        let node: u64 = field(0)?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("interval {t}: bad node id: {e}")))?;
        let feature: usize = field(1)?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("interval {t}: bad feature index: {e}")))?;
        let step: usize = field(2)?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("interval {t}: bad step index: {e}")))?;
        let value: f64 = field(3)?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("interval {t}: bad value: {e}")))?;
        let row = *index_of.get(&node).ok_or_else(|| {
            Error::Validation(format!("interval {t}: feature row for unknown node {node}"))
        })?;
        if feature >= feature_dim || step >= steps {
            return Err(Error::Validation(format!(
                "interval {t}: feature index ({feature},{step}) outside {feature_dim}x{steps}"
            )));
        }
        if !values[[row, feature, step]].is_nan() {
            return Err(Error::Validation(format!(
                "interval {t}: duplicate feature entry for node {node} ({feature},{step})"
            )));
        }
        if value.is_nan() {
            return Err(Error::Validation(format!(
                "interval {t}: NaN feature value for node {node} ({feature},{step})"
            )));
        }
        values[[row, feature, step]] = value;
        filled += 1;
    }
    let expected = nodes.len() * feature_dim * steps;
    if filled != expected {
        return Err(Error::Validation(format!(
            "interval {t}: features.csv has {filled} entries, expected {expected}"
        )));
    }
    Ok(values)
}

fn load_features_binary(
    bin_path: &Path,
    sidecar_path: &Path,
    t: usize,
    n_nodes: usize,
    feature_dim: usize,
    steps: usize,
) -> Result<Array3<f64>> {
    let sidecar_raw = fs::read_to_string(sidecar_path).map_err(|e| {
        Error::Format(format!(
            "interval {t}: missing feature sidecar {}: {e}",
            sidecar_path.display()
        ))
    })?;
    let sidecar: FeatureSidecar = serde_json::from_str(&sidecar_raw)
        .map_err(|e| Error::Format(format!("interval {t}: malformed feature sidecar: {e}")))?;
    if sidecar.order != "row-major" {
        return Err(Error::Format(format!(
            "interval {t}: unsupported feature order {:?}",
            sidecar.order
        )));
    }
    if sidecar.dtype != "f64-le" {
        return Err(Error::Format(format!(
            "interval {t}: unsupported feature dtype {:?}",
            sidecar.dtype
        )));
    }
    if sidecar.shape != [n_nodes, feature_dim, steps] {
        return Err(Error::Validation(format!(
            "interval {t}: sidecar shape {:?} does not match manifest {}x{}x{}",
            sidecar.shape, n_nodes, feature_dim, steps
        )));
    }
    let bytes = fs::read(bin_path)?;
    let expected = n_nodes * feature_dim * steps * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "interval {t}: features.bin is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((n_nodes, feature_dim, steps), flat)
        .map_err(|e| Error::Format(format!("interval {t}: cannot reshape payload: {e}")))
}

/// Write a sequence in the canonical CSV layout. Deterministic: the same
/// sequence always produces byte-identical files.
pub fn write_dataset(seq: &DynamicGraphSequence, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let all_ids: BTreeSet<u64> = seq
        .intervals()
        .iter()
        .flat_map(|(g, _)| g.node_order().iter().map(|n| n.0))
        .collect();
    let manifest = DatasetManifest {
        t_intervals: seq.len(),
        feature_dim: seq.feature_dim(),
        steps_per_interval: seq.interval(0).1.steps(),
        node_count: all_ids.len(),
        interval_nodes: seq
            .intervals()
            .iter()
            .map(|(g, _)| g.node_order().iter().map(|n| n.0).collect())
            .collect(),
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("cannot serialize manifest: {e}")))?;
    manifest_json.push('\n');
    fs::write(root.join("manifest.json"), manifest_json)?;

    for (t, (graph, features)) in seq.intervals().iter().enumerate() {
        let dir = interval_dir(root, t);
        fs::create_dir_all(&dir)?;

        let mut edge_writer = csv::Writer::from_path(dir.join("edges.csv"))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        edge_writer
            .write_record(["src", "dst", "weight"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (a, b, w) in graph.edges() {
            edge_writer
                .write_record([a.0.to_string(), b.0.to_string(), w.to_string()])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        edge_writer
            .flush()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;

        let mut feat_writer = csv::Writer::from_path(dir.join("features.csv"))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        feat_writer
            .write_record(["node", "feature", "step", "value"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let values = features.values();
        for (i, node) in features.node_order().iter().enumerate() {
            for d in 0..features.feature_dim() {
                for s in 0..features.steps() {
                    feat_writer
                        .write_record([
                            node.0.to_string(),
                            d.to_string(),
                            s.to_string(),
                            values[[i, d, s]].to_string(),
                        ])
                        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                }
            }
        }
        feat_writer
            .flush()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}
