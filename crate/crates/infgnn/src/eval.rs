//! Metrics, node-group and horizon breakdowns, baselines, and ablations.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, node_churn, Churn, DynamicGraphSequence, FeatureTensor, IntervalGraph, NodeId};
use crate::model::{forward, normalize_adjacency, ModelState, NormStats};
use crate::trainer::{plain_train_interval, run_continual, TrainConfig};

/// Default reported horizons, in steps of the base resolution.
pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeGroup {
    Existing,
    New,
    All,
}

impl std::fmt::Display for NodeGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NodeGroup::Existing => "existing",
            NodeGroup::New => "new",
            NodeGroup::All => "all",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Test interval index (0-based).
    pub interval: usize,
    pub group: NodeGroup,
    pub horizon_steps: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; absent when no entry clears the flow floor.
    pub mape: Option<f64>,
    pub model_tag: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

/// MAE, RMSE, and MAPE over the masked entries. Returns `None` when the mask
/// selects nothing (an undefined metric is absent, never zero). MAPE
/// additionally skips entries whose truth is below the flow floor.
pub fn compute_metrics(
    pred: &[f64],
    truth: &[f64],
    mask: &[bool],
    mape_floor: f64,
) -> Result<Option<Metrics>> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Argument("metric input lengths differ".into()));
    }
    let mut n = 0usize;
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    let mut mape_n = 0usize;
    let mut mape_sum = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let e = pred[i] - truth[i];
        n += 1;
        sum_abs += e.abs();
        sum_sq += e * e;
        if truth[i].abs() >= mape_floor {
            mape_n += 1;
            mape_sum += e.abs() / truth[i].abs();
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(Metrics {
        mae: sum_abs / n as f64,
        rmse: (sum_sq / n as f64).sqrt(),
        mape: (mape_n > 0).then(|| 100.0 * mape_sum / mape_n as f64),
    }))
}

/// One prediction entry: forecast step index plus (pred, truth).
pub type Entry = (usize, f64, f64);

fn metrics_over<'a>(
    entries: impl Iterator<Item = &'a Entry>,
    horizon: usize,
    mape_floor: f64,
) -> Option<Metrics> {
    let mut n = 0usize;
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    let mut mape_n = 0usize;
    let mut mape_sum = 0.0;
    for &(k, p, t) in entries {
        if k >= horizon {
            continue;
        }
        let e = p - t;
        n += 1;
        sum_abs += e.abs();
        sum_sq += e * e;
        if t.abs() >= mape_floor {
            mape_n += 1;
            mape_sum += e.abs() / t.abs();
        }
    }
    (n > 0).then(|| Metrics {
        mae: sum_abs / n as f64,
        rmse: (sum_sq / n as f64).sqrt(),
        mape: (mape_n > 0).then(|| 100.0 * mape_sum / mape_n as f64),
    })
}

/// Per-group, per-horizon records. The pooled group is computed over the
/// existing entries followed by the new entries, so it is bit-identical to a
/// concatenated computation.
pub fn group_breakdown(
    existing: &[Entry],
    new: &[Entry],
    horizons: &[usize],
    interval: usize,
    mape_floor: f64,
    model_tag: &str,
    seed: u64,
) -> Vec<MetricRecord> {
    let mut records = Vec::new();
    for &h in horizons {
        let groups: [(NodeGroup, Box<dyn Iterator<Item = &Entry>>); 3] = [
            (NodeGroup::Existing, Box::new(existing.iter())),
            (NodeGroup::New, Box::new(new.iter())),
            (NodeGroup::All, Box::new(existing.iter().chain(new.iter()))),
        ];
        for (group, entries) in groups {
            if let Some(m) = metrics_over(entries, h, mape_floor) {
                records.push(MetricRecord {
                    interval,
                    group,
                    horizon_steps: h,
                    mae: m.mae,
                    rmse: m.rmse,
                    mape: m.mape,
                    model_tag: model_tag.to_string(),
                    seed,
                });
            }
        }
    }
    records
}

/// Inductive evaluation: run the trained model over every window of a test
/// interval's full graph, denormalize, and break errors down by node group
/// and horizon.
pub fn evaluate_on_interval(
    state: &ModelState,
    test: &(IntervalGraph, FeatureTensor),
    churn: &Churn,
    cfg: &TrainConfig,
    norm: &NormStats,
    model_tag: &str,
) -> Result<Vec<MetricRecord>> {
    let (graph, features) = test;
    let operator = normalize_adjacency(graph.adjacency(), cfg.adjacency_mode)?;
    let values = features.values();
    let steps = features.steps();
    let (m, k) = (cfg.input_steps, cfg.output_steps);
    if steps < m + k {
        return Err(Error::Validation(format!(
            "test interval {} too short for evaluation windows",
            graph.interval_index()
        )));
    }
    let existing_rows: Vec<usize> = graph
        .node_order()
        .iter()
        .enumerate()
        .filter(|(_, n)| churn.persisting.contains(n))
        .map(|(i, _)| i)
        .collect();
    let new_rows: Vec<usize> = graph
        .node_order()
        .iter()
        .enumerate()
        .filter(|(_, n)| churn.added.contains(n))
        .map(|(i, _)| i)
        .collect();

    let mut existing: Vec<Entry> = Vec::new();
    let mut new: Vec<Entry> = Vec::new();
    let d_dim = features.feature_dim();
    for a in 0..=steps - m - k {
        let input = norm.normalize3(&values.slice(s![.., .., a..a + m]).to_owned());
        let pred_norm = forward(&state.params, &state.dims, &operator, &input)?;
        let pred = norm.denormalize3(&pred_norm);
        let truth = values.slice(s![.., .., a + m..a + m + k]);
        for (rows, sink) in [(&existing_rows, &mut existing), (&new_rows, &mut new)] {
            for &row in rows.iter() {
                for d in 0..d_dim {
                    for step in 0..k {
                        sink.push((step, pred[[row, d, step]], truth[[row, d, step]]));
                    }
                }
            }
        }
    }
    let horizons: Vec<usize> = DEFAULT_HORIZONS
        .iter()
        .copied()
        .filter(|&h| h <= k)
        .collect();
    Ok(group_breakdown(
        &existing,
        &new,
        &horizons,
        graph.interval_index(),
        cfg.mape_floor,
        model_tag,
        cfg.seed,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTag {
    /// Full-graph training each interval, warm-started from the previous one.
    Retrain,
    /// Train only on newly appeared nodes, warm-started.
    Expand,
    /// Simulate next-interval nodes by the mean of their nearest data-bearing
    /// neighbors, then train on the combined graph.
    KnnKriging,
}

impl std::fmt::Display for BaselineTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BaselineTag::Retrain => "retrain",
            BaselineTag::Expand => "expand",
            BaselineTag::KnnKriging => "knn_kriging",
        };
        write!(f, "{s}")
    }
}

/// Number of nearest neighbors used by the kriging baseline.
pub const KRIGING_NEIGHBORS: usize = 3;

fn knn_simulated_interval(
    g_next: &IntervalGraph,
    curr: &(IntervalGraph, FeatureTensor),
    k_neighbors: usize,
) -> Result<(IntervalGraph, FeatureTensor)> {
    let (g_curr, x_curr) = curr;
    let data_nodes = g_curr.node_set();
    let steps = x_curr.steps();
    let d_dim = x_curr.feature_dim();
    // Next interval's topology restricted to nodes we can feed: everyone,
    // with unknown nodes simulated from hop-nearest data-bearing neighbors.
    let nodes: Vec<NodeId> = g_next.node_order().to_vec();
    let mut values = Array3::zeros((nodes.len(), d_dim, steps));
    for (i, &v) in nodes.iter().enumerate() {
        if let Some(series) = x_curr.series(v) {
            values.index_axis_mut(ndarray::Axis(0), i).assign(&series);
            continue;
        }
        // Breadth-first by hop distance; ties break by node id through the
        // ordered frontier.
        let mut sources: Vec<NodeId> = Vec::new();
        let mut visited: BTreeSet<NodeId> = [v].into();
        let mut frontier: Vec<NodeId> = vec![v];
        while sources.len() < k_neighbors && !frontier.is_empty() {
            let mut next: BTreeSet<NodeId> = BTreeSet::new();
            for &u in &frontier {
                for w in g_next.neighbors(u) {
                    if visited.insert(w) {
                        next.insert(w);
                    }
                }
            }
            for w in &next {
                if data_nodes.contains(w) && sources.len() < k_neighbors {
                    sources.push(*w);
                }
            }
            frontier = next.into_iter().collect();
        }
        if sources.is_empty() {
            sources = data_nodes.iter().copied().collect();
        }
        for d in 0..d_dim {
            for s_idx in 0..steps {
                let mean: f64 = sources
                    .iter()
                    .map(|&u| x_curr.series(u).unwrap()[[d, s_idx]])
                    .sum::<f64>()
                    / sources.len() as f64;
                values[[i, d, s_idx]] = mean;
            }
        }
    }
    let features = FeatureTensor::new(values, nodes)?;
    Ok((g_next.clone(), features))
}

/// Run one baseline over the whole sequence; metric records carry the tag.
pub fn run_baseline(
    tag: BaselineTag,
    seq: &DynamicGraphSequence,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(Error::Argument("baselines need at least two intervals".into()));
    }
    let dims = cfg.model_dims(seq.feature_dim());
    let mut state = ModelState::init(dims, cfg.seed)?;
    let norm = NormStats::from_values(seq.interval(0).1.values().iter());
    let tag_str = tag.to_string();
    let mut records = Vec::new();
    for t in 0..seq.len() - 1 {
        match tag {
            BaselineTag::Retrain => {
                plain_train_interval(&mut state, seq.interval(t), cfg, &norm)?;
            }
            BaselineTag::Expand => {
                if t == 0 {
                    plain_train_interval(&mut state, seq.interval(t), cfg, &norm)?;
                } else {
                    let churn = node_churn(&seq.interval(t - 1).0, &seq.interval(t).0);
                    if !churn.added.is_empty() {
                        let sub = induced_subgraph(&seq.interval(t).0, &churn.added)?;
                        let mut vals = Array3::zeros((
                            sub.node_count(),
                            seq.feature_dim(),
                            seq.interval(t).1.steps(),
                        ));
                        for (i, &n) in sub.node_order().iter().enumerate() {
                            vals.index_axis_mut(ndarray::Axis(0), i)
                                .assign(&seq.interval(t).1.series(n).unwrap());
                        }
                        let features = FeatureTensor::new(vals, sub.node_order().to_vec())?;
                        plain_train_interval(&mut state, &(sub, features), cfg, &norm)?;
                    }
                }
            }
            BaselineTag::KnnKriging => {
                let simulated = knn_simulated_interval(
                    &seq.interval(t + 1).0,
                    seq.interval(t),
                    KRIGING_NEIGHBORS,
                )?;
                plain_train_interval(&mut state, &simulated, cfg, &norm)?;
            }
        }
        let test = seq.interval(t + 1);
        let churn = node_churn(&seq.interval(t).0, &test.0);
        records.extend(evaluate_on_interval(
            &state, test, &churn, cfg, &norm, &tag_str,
        )?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTag {
    /// Whole graph instead of the informative subgraph.
    WoSg,
    /// Random subgraph of the same size.
    WoIfg,
    /// No memory buffer at all.
    WoMb,
    /// Buffer stores random timestamps.
    WoIfs,
    /// No RI smoothing term.
    WoRis,
}

impl std::fmt::Display for AblationTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblationTag::WoSg => "wo_sg",
            AblationTag::WoIfg => "wo_ifg",
            AblationTag::WoMb => "wo_mb",
            AblationTag::WoIfs => "wo_ifs",
            AblationTag::WoRis => "wo_ris",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for AblationTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wo_sg" => Ok(AblationTag::WoSg),
            "wo_ifg" => Ok(AblationTag::WoIfg),
            "wo_mb" => Ok(AblationTag::WoMb),
            "wo_ifs" => Ok(AblationTag::WoIfs),
            "wo_ris" => Ok(AblationTag::WoRis),
            other => Err(Error::Config(format!("unknown ablation tag {other:?}"))),
        }
    }
}

/// Toggle preset for one ablation arm; everything else, including the seed,
/// stays identical to the base configuration.
pub fn ablation_config(base: &TrainConfig, tag: AblationTag) -> TrainConfig {
    let mut cfg = base.clone();
    match tag {
        AblationTag::WoSg => cfg.use_subgraph = false,
        AblationTag::WoIfg => cfg.informative_subgraph = false,
        AblationTag::WoMb => cfg.use_buffer = false,
        AblationTag::WoIfs => cfg.informative_buffer = false,
        AblationTag::WoRis => cfg.use_ris = false,
    }
    cfg
}

/// Run the requested ablation arms under identical seeds.
pub fn run_ablations(
    seq: &DynamicGraphSequence,
    base: &TrainConfig,
    which: &[AblationTag],
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &tag in which {
        let cfg = ablation_config(base, tag);
        let outcome = run_continual(seq, &cfg, &tag.to_string())?;
        records.extend(outcome.records);
    }
    Ok(records)
}

/// A sweepable scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    RisWeight,
    BufferSize,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_ris" | "ris_weight" => Ok(SweepParam::RisWeight),
            "buffer_capacity" | "buffer_size" => Ok(SweepParam::BufferSize),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// One full run per parameter value, same seed across arms; the model tag
/// records the setting.
pub fn run_sweep(
    seq: &DynamicGraphSequence,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        let tag = match param {
            SweepParam::RisWeight => {
                cfg.lambda_ris = v;
                format!("ris_weight={v}")
            }
            SweepParam::BufferSize => {
                cfg.buffer_capacity = v as usize;
                format!("buffer_size={}", v as usize)
            }
        };
        let outcome = run_continual(seq, &cfg, &tag)?;
        records.extend(outcome.records);
    }
    Ok(records)
}

/// Append records to a CSV file, writing the header only when the file is
/// new or empty.
pub fn append_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if fresh {
        writer
            .write_record(["interval", "group", "horizon", "mae", "rmse", "mape", "model_tag", "seed"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    for r in records {
        writer
            .write_record([
                r.interval.to_string(),
                r.group.to_string(),
                r.horizon_steps.to_string(),
                r.mae.to_string(),
                r.rmse.to_string(),
                r.mape.map(|v| v.to_string()).unwrap_or_default(),
                r.model_tag.clone(),
                r.seed.to_string(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Aligned-column summary: one row per (model, group), averaged over
/// intervals and seeds, with MAE/RMSE/MAPE columns per horizon.
pub fn render_summary(records: &[MetricRecord]) -> String {
    use std::collections::BTreeMap;
    let mut horizons: BTreeSet<usize> = BTreeSet::new();
    let mut cells: BTreeMap<(String, NodeGroup, usize), (f64, f64, f64, usize, usize)> =
        BTreeMap::new();
    for r in records {
        horizons.insert(r.horizon_steps);
        let cell = cells
            .entry((r.model_tag.clone(), r.group, r.horizon_steps))
            .or_insert((0.0, 0.0, 0.0, 0, 0));
        cell.0 += r.mae;
        cell.1 += r.rmse;
        cell.3 += 1;
        if let Some(m) = r.mape {
            cell.2 += m;
            cell.4 += 1;
        }
    }
    let mut out = String::new();
    let mut header = format!("{:<24}{:<10}", "model", "group");
    for h in &horizons {
        header.push_str(&format!(
            "{:>10}{:>10}{:>10}",
            format!("mae@{h}"),
            format!("rmse@{h}"),
            format!("mape@{h}")
        ));
    }
    out.push_str(&header);
    out.push('\n');
    let keys: BTreeSet<(String, NodeGroup)> = cells
        .keys()
        .map(|(tag, group, _)| (tag.clone(), *group))
        .collect();
    for (tag, group) in keys {
        let mut line = format!("{:<24}{:<10}", tag, group.to_string());
        for &h in &horizons {
            if let Some((mae, rmse, mape, n, mape_n)) = cells.get(&(tag.clone(), group, h)) {
                line.push_str(&format!(
                    "{:>10.3}{:>10.3}{:>10}",
                    mae / *n as f64,
                    rmse / *n as f64,
                    if *mape_n > 0 {
                        format!("{:.2}", mape / *mape_n as f64)
                    } else {
                        "-".to_string()
                    }
                ));
            } else {
                line.push_str(&format!("{:>10}{:>10}{:>10}", "-", "-", "-"));
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Convenience wrapper for the full method run plus exports, used by the CLI.
pub struct FullRunArtifacts {
    pub records: Vec<MetricRecord>,
    pub reports: Vec<crate::trainer::IntervalReport>,
    pub final_state: ModelState,
    pub norm: NormStats,
}

pub fn run_full_method(
    seq: &DynamicGraphSequence,
    cfg: &TrainConfig,
) -> Result<FullRunArtifacts> {
    let outcome = run_continual(seq, cfg, "inf_gnn")?;
    Ok(FullRunArtifacts {
        records: outcome.records,
        reports: outcome.reports,
        final_state: outcome.final_state,
        norm: outcome.norm,
    })
}
