//! Loss assembly, parameter-importance tables, and the continual training
//! loop over interval transitions.
//!
//! Each interval is trained on its informative subgraph plus simulated new
//! nodes, replaying influential timestamps from the memory buffer, and
//! minimizing the base forecast error plus two quadratic consolidation
//! penalties anchored at the previous interval's parameters: one weighted by
//! the empirical Fisher of the loss, one by the sensitivity of the soft
//! Relation Importance to each parameter.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{node_churn, DynamicGraphSequence, FeatureTensor, IntervalGraph, NodeId};
use crate::influence::{
    combine_influence, hessian_factor, influence_from_parts, sample_simulated_test_sets,
    HessianMode, MemoryBuffer, RankingMode,
};
use crate::model::{
    backward, batch_loss_and_gradient, forward_cached, normalize_adjacency, optimizer_step,
    per_sample_losses_and_gradients, AdjacencyMode, GraphContext, ModelDims, ModelState,
    NormStats, Params, TimestampId, TrainSample,
};
use crate::ri::{
    induce_persisting_subgraph, neighbors_merge, attach_new_nodes, ri_scores,
    select_informative_subgraph, RiScoreTable,
};
use crate::rngutil::{
    stream_rng, TAG_BUFFER_INIT, TAG_FISHER, TAG_MEMORY_DRAW, TAG_RANDOM_BUFFER,
    TAG_RANDOM_SUBGRAPH, TAG_SHUFFLE, TAG_SIM_SETS,
};
use crate::softri::{plan_grids, soft_ri_with_prediction_grad, GridPlan, RowNeighborhoods, SoftRiConfig};

/// Flat training configuration. Every field has the published default, so an
/// empty JSON object is a valid config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Input window length M.
    pub input_steps: usize,
    /// Forecast horizon K.
    pub output_steps: usize,
    /// Training epochs I per interval.
    pub epochs: usize,
    /// Pseudo-update epochs N before influence scoring begins.
    pub pseudo_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub subgraph_fraction: f64,
    pub k_hop: usize,
    pub lambda_ewc: f64,
    pub lambda_ris: f64,
    pub sim_set_size: usize,
    pub seed: u64,
    pub use_subgraph: bool,
    pub informative_subgraph: bool,
    pub use_buffer: bool,
    pub informative_buffer: bool,
    pub use_ris: bool,
    pub use_ewc: bool,
    pub hidden: usize,
    pub conv_width: usize,
    /// Histogram bins for RI scoring.
    pub bins: usize,
    pub hessian_mode: HessianMode,
    pub damping: f64,
    pub exact_cap: usize,
    pub ranking: RankingMode,
    /// Fraction of each batch drawn from the memory buffer.
    pub memory_fraction: f64,
    /// Windows sampled for the loss Fisher.
    pub fisher_samples: usize,
    /// Window pairs sampled for the RI Fisher.
    pub ris_samples: usize,
    /// Compute the loss Fisher on the full current graph instead of the
    /// cropped training graph.
    pub fisher_on_full_graph: bool,
    pub adjacency_mode: AdjacencyMode,
    pub mape_floor: f64,
    pub soft_ri_bins: usize,
    pub soft_ri_bandwidth_factor: f64,
    /// Keep per-epoch window-order logs in the interval reports.
    pub record_window_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let soft = SoftRiConfig::default();
        Self {
            input_steps: 12,
            output_steps: 12,
            epochs: 50,
            pseudo_epochs: 45,
            batch_size: 128,
            lr: 0.01,
            buffer_capacity: 1000,
            subgraph_fraction: 0.10,
            k_hop: 1,
            lambda_ewc: 0.5,
            lambda_ris: 0.5,
            sim_set_size: 100,
            seed: 0,
            use_subgraph: true,
            informative_subgraph: true,
            use_buffer: true,
            informative_buffer: true,
            use_ris: true,
            use_ewc: true,
            hidden: 64,
            conv_width: 3,
            bins: 64,
            hessian_mode: HessianMode::Diagonal,
            damping: 1e-3,
            exact_cap: 2000,
            ranking: RankingMode::Signed,
            memory_fraction: 0.25,
            fisher_samples: 32,
            ris_samples: 8,
            fisher_on_full_graph: false,
            adjacency_mode: AdjacencyMode::SymmetricNorm,
            mape_floor: 1.0,
            soft_ri_bins: soft.bins,
            soft_ri_bandwidth_factor: soft.bandwidth_factor,
            record_window_log: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.pseudo_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "pseudo_epochs ({}) must be smaller than epochs ({})",
                self.pseudo_epochs, self.epochs
            )));
        }
        if self.input_steps == 0 || self.output_steps == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if !(self.subgraph_fraction > 0.0 && self.subgraph_fraction <= 1.0) {
            return Err(Error::Config("subgraph_fraction must lie in (0, 1]".into()));
        }
        if self.lambda_ewc < 0.0 || self.lambda_ris < 0.0 {
            return Err(Error::Config("penalty weights must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.memory_fraction) {
            return Err(Error::Config("memory_fraction must lie in [0, 1)".into()));
        }
        if self.k_hop == 0 || self.bins == 0 || self.sim_set_size == 0 {
            return Err(Error::Config("k_hop, bins, sim_set_size must be positive".into()));
        }
        if self.buffer_capacity == 0 && self.use_buffer {
            return Err(Error::Config("buffer_capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn model_dims(&self, feature_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            input_steps: self.input_steps,
            output_steps: self.output_steps,
            hidden: self.hidden,
            conv_width: self.conv_width,
        }
    }

    pub fn soft_ri(&self) -> SoftRiConfig {
        SoftRiConfig {
            bins: self.soft_ri_bins,
            bandwidth_factor: self.soft_ri_bandwidth_factor,
        }
    }
}

/// Per-parameter importance weights anchored at a parameter snapshot.
#[derive(Debug, Clone)]
pub struct FisherTable {
    pub loss_fisher: Vec<f64>,
    pub ri_fisher: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl FisherTable {
    pub fn validate(&self, param_count: usize) -> Result<()> {
        if self.loss_fisher.len() != param_count
            || self.ri_fisher.len() != param_count
            || self.anchor.len() != param_count
        {
            return Err(Error::Argument("Fisher table misaligned with model".into()));
        }
        if self
            .loss_fisher
            .iter()
            .chain(&self.ri_fisher)
            .any(|&f| f < 0.0 || !f.is_finite())
        {
            return Err(Error::Argument("Fisher entries must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Empirical Fisher: mean squared per-sample loss gradient, per parameter.
pub fn fisher_information(state: &ModelState, samples: &[TrainSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Argument("fisher needs samples".into()));
    }
    let per_sample = per_sample_losses_and_gradients(&state.params, &state.dims, samples)?;
    let p = state.dims.param_count();
    let mut acc = vec![0.0; p];
    for (_, g) in &per_sample {
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v * v;
        }
    }
    let n = samples.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Quadratic anchor penalty weighted by a Fisher vector.
pub fn ewc_penalty(params_flat: &[f64], fisher: &[f64], anchor: &[f64], lambda: f64) -> f64 {
    lambda
        * params_flat
            .iter()
            .zip(fisher)
            .zip(anchor)
            .map(|((&p, &f), &a)| f * (p - a) * (p - a))
            .sum::<f64>()
}

/// Combined smoothing penalty (loss-Fisher and RI-Fisher terms) with its
/// gradient; disabled terms contribute exactly zero.
pub fn smoothing_penalty_and_grad(
    params_flat: &[f64],
    fisher: Option<&FisherTable>,
    cfg: &TrainConfig,
) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; params_flat.len()];
    let Some(table) = fisher else {
        return (value, grad);
    };
    if cfg.use_ewc && cfg.lambda_ewc > 0.0 {
        value += ewc_penalty(params_flat, &table.loss_fisher, &table.anchor, cfg.lambda_ewc);
        for i in 0..params_flat.len() {
            grad[i] +=
                2.0 * cfg.lambda_ewc * table.loss_fisher[i] * (params_flat[i] - table.anchor[i]);
        }
    }
    if cfg.use_ris && cfg.lambda_ris > 0.0 {
        value += ewc_penalty(params_flat, &table.ri_fisher, &table.anchor, cfg.lambda_ris);
        for i in 0..params_flat.len() {
            grad[i] +=
                2.0 * cfg.lambda_ris * table.ri_fisher[i] * (params_flat[i] - table.anchor[i]);
        }
    }
    (value, grad)
}

/// Total objective: base loss plus both smoothing terms.
pub fn total_loss(
    base: f64,
    params_flat: &[f64],
    fisher: Option<&FisherTable>,
    cfg: &TrainConfig,
) -> f64 {
    base + smoothing_penalty_and_grad(params_flat, fisher, cfg).0
}

/// Sliding windows over one training graph: stride 1, inputs of M steps,
/// targets of the next K, never straddling the interval boundary.
pub fn build_window_pool(
    interval: usize,
    ctx: Arc<GraphContext>,
    values: &Array3<f64>,
    input_steps: usize,
    output_steps: usize,
) -> Vec<TrainSample> {
    let steps = values.shape()[2];
    if steps < input_steps + output_steps {
        return Vec::new();
    }
    let anchors = steps - input_steps - output_steps + 1;
    (0..anchors)
        .map(|a| TrainSample {
            timestamp: TimestampId::new(interval, a),
            input: values.slice(s![.., .., a..a + input_steps]).to_owned(),
            target: values
                .slice(s![.., .., a + input_steps..a + input_steps + output_steps])
                .to_owned(),
            graph: ctx.clone(),
        })
        .collect()
}

/// Scalar soft-RI of predicted windows together with its exact parameter
/// gradient: forward both windows, differentiate the soft RI against the
/// predictions, and pull the seeds back through the model.
pub fn soft_ri_param_gradient(
    params: &Params<f64>,
    dims: &ModelDims,
    operator: &ndarray::Array2<f64>,
    window_prev: &Array3<f64>,
    window_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
    grids: &GridPlan,
    cfg: &SoftRiConfig,
) -> Result<(f64, Vec<f64>)> {
    let (pred_prev, cache_prev) = forward_cached(params, dims, operator, window_prev)?;
    let (pred_curr, cache_curr) = forward_cached(params, dims, operator, window_curr)?;
    let (value, dprev, dcurr) =
        soft_ri_with_prediction_grad(&pred_prev, &pred_curr, neighborhoods, grids, cfg)?;
    let g_prev = backward(params, dims, operator, &cache_prev, &dprev);
    let g_curr = backward(params, dims, operator, &cache_curr, &dcurr);
    let grad: Vec<f64> = g_prev
        .to_flat()
        .iter()
        .zip(g_curr.to_flat())
        .map(|(a, b)| a + b)
        .collect();
    Ok((value, grad))
}

/// Scalar soft-RI value only (fixed grids), for finite-difference oracles.
pub fn soft_ri_scalar(
    params: &Params<f64>,
    dims: &ModelDims,
    operator: &ndarray::Array2<f64>,
    window_prev: &Array3<f64>,
    window_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
    grids: &GridPlan,
    cfg: &SoftRiConfig,
) -> Result<f64> {
    let (pred_prev, _) = forward_cached(params, dims, operator, window_prev)?;
    let (pred_curr, _) = forward_cached(params, dims, operator, window_curr)?;
    let (value, _, _) =
        soft_ri_with_prediction_grad(&pred_prev, &pred_curr, neighborhoods, grids, cfg)?;
    Ok(value)
}

/// RI-based parameter importance: mean squared gradient of the mean
/// subgraph-RI scalar over sampled window pairs from the transition.
#[allow(clippy::too_many_arguments)]
pub fn ri_fisher(
    state: &ModelState,
    operator: &ndarray::Array2<f64>,
    x_prev: &Array3<f64>,
    x_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
    cfg: &TrainConfig,
    interval: usize,
) -> Result<Vec<f64>> {
    let p = state.dims.param_count();
    let usable: RowNeighborhoods = neighborhoods
        .iter()
        .filter(|(_, hood)| !hood.is_empty())
        .cloned()
        .collect();
    if usable.is_empty() {
        return Ok(vec![0.0; p]);
    }
    let m = cfg.input_steps;
    let max_anchor_prev = x_prev.shape()[2].checked_sub(m);
    let max_anchor_curr = x_curr.shape()[2].checked_sub(m);
    let (Some(ap), Some(ac)) = (max_anchor_prev, max_anchor_curr) else {
        return Ok(vec![0.0; p]);
    };
    let max_anchor = ap.min(ac);
    if max_anchor == 0 {
        return Ok(vec![0.0; p]);
    }
    let mut rng = stream_rng(cfg.seed, &[TAG_FISHER, interval as u64, 1]);
    let soft_cfg = cfg.soft_ri();
    let mut acc = vec![0.0; p];
    let count = cfg.ris_samples.max(1);
    for _ in 0..count {
        let a = rng.gen_range(0..max_anchor);
        let w_prev = x_prev.slice(s![.., .., a..a + m]).to_owned();
        let w_curr = x_curr.slice(s![.., .., a..a + m]).to_owned();
        let (pred_prev, _) = forward_cached(&state.params, &state.dims, operator, &w_prev)?;
        let (pred_curr, _) = forward_cached(&state.params, &state.dims, operator, &w_curr)?;
        let grids = plan_grids(&pred_prev, &pred_curr, &usable);
        let (_, grad) = soft_ri_param_gradient(
            &state.params,
            &state.dims,
            operator,
            &w_prev,
            &w_curr,
            &usable,
            &grids,
            &soft_cfg,
        )?;
        for (slot, g) in acc.iter_mut().zip(&grad) {
            *slot += g * g;
        }
    }
    for slot in &mut acc {
        *slot /= count as f64;
    }
    Ok(acc)
}

fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    stream_rng(seed, tags).gen()
}

/// What one trained interval leaves behind for inspection and export.
#[derive(Debug, Clone)]
pub struct IntervalReport {
    pub interval: usize,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Node ordering of the training graph (subgraph plus merged new nodes).
    pub train_nodes: Vec<NodeId>,
    pub subgraph: Option<BTreeSet<NodeId>>,
    pub ri_table: Option<RiScoreTable>,
    /// Buffer contents after each epoch's update: (epoch, entries).
    pub buffer_history: Vec<(usize, Vec<(TimestampId, f64)>)>,
    /// Per-epoch anchor order, when enabled.
    pub window_log: Vec<Vec<TimestampId>>,
}

struct TrainingGraph {
    graph: IntervalGraph,
    features: FeatureTensor,
    subgraph: Option<BTreeSet<NodeId>>,
    ri_table: Option<RiScoreTable>,
}

/// Pick the training graph for an interval: the informative (or random)
/// persisting subgraph with new nodes merged in, or the whole graph.
fn build_training_graph(
    prev: Option<&(IntervalGraph, FeatureTensor)>,
    curr: &(IntervalGraph, FeatureTensor),
    cfg: &TrainConfig,
) -> Result<TrainingGraph> {
    let (g_curr, x_curr) = curr;
    let Some((g_prev, x_prev)) = prev else {
        return Ok(TrainingGraph {
            graph: g_curr.clone(),
            features: x_curr.clone(),
            subgraph: None,
            ri_table: None,
        });
    };
    if !cfg.use_subgraph {
        return Ok(TrainingGraph {
            graph: g_curr.clone(),
            features: x_curr.clone(),
            subgraph: None,
            ri_table: None,
        });
    }
    let churn = node_churn(g_prev, g_curr);
    if churn.persisting.is_empty() {
        return Err(Error::Validation(format!(
            "no persisting nodes between intervals {} and {}",
            g_prev.interval_index(),
            g_curr.interval_index()
        )));
    }
    let (selected, subg, table) = if cfg.informative_subgraph {
        let table = ri_scores(g_prev, g_curr, x_prev, x_curr, cfg.k_hop, cfg.bins)?;
        let (selected, subg) =
            select_informative_subgraph(&table, g_prev, g_curr, cfg.subgraph_fraction)?;
        (selected, subg, Some(table))
    } else {
        // Uncurated arm: uniformly random persisting nodes of the same size.
        let target = ((cfg.subgraph_fraction * g_curr.node_count() as f64).floor() as usize)
            .max(1)
            .min(churn.persisting.len());
        let mut pool: Vec<NodeId> = churn.persisting.iter().copied().collect();
        let mut rng = stream_rng(
            cfg.seed,
            &[TAG_RANDOM_SUBGRAPH, g_curr.interval_index() as u64],
        );
        pool.shuffle(&mut rng);
        let selected: BTreeSet<NodeId> = pool.into_iter().take(target).collect();
        let subg = induce_persisting_subgraph(g_prev, g_curr, &selected)?;
        (selected, subg, None)
    };
    let simulated = neighbors_merge(&churn.added, g_curr, &selected, x_curr, cfg.k_hop)?;
    let (graph, features) = attach_new_nodes(&subg, g_curr, x_curr, &simulated)?;
    Ok(TrainingGraph {
        graph,
        features,
        subgraph: Some(selected),
        ri_table: table,
    })
}

fn make_context(graph: &IntervalGraph, cfg: &TrainConfig) -> Result<Arc<GraphContext>> {
    Ok(Arc::new(GraphContext {
        operator: normalize_adjacency(graph.adjacency(), cfg.adjacency_mode)?,
        node_ids: graph.node_order().to_vec(),
    }))
}

fn epoch_order(cfg: &TrainConfig, interval: usize, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(cfg.seed, &[TAG_SHUFFLE, interval as u64, epoch as u64]);
    order.shuffle(&mut rng);
    order
}

/// Run one interval of the continual procedure: subgraph selection, new-node
/// merging, pseudo-update epochs, influence-scored buffer replacement, and
/// penalized optimization. Returns the interval report and the fresh Fisher
/// table anchored at the end-of-interval parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_interval(
    state: &mut ModelState,
    prev: Option<&(IntervalGraph, FeatureTensor)>,
    curr: &(IntervalGraph, FeatureTensor),
    buffer: &mut MemoryBuffer,
    fisher: Option<&FisherTable>,
    cfg: &TrainConfig,
    norm: &NormStats,
    first_interval: bool,
) -> Result<(IntervalReport, FisherTable)> {
    cfg.validate()?;
    let t = curr.0.interval_index();
    let training = build_training_graph(prev, curr, cfg)?;
    let ctx = make_context(&training.graph, cfg)?;
    let pool = build_window_pool(
        t,
        ctx.clone(),
        &norm.normalize3(training.features.values()),
        cfg.input_steps,
        cfg.output_steps,
    );
    if pool.is_empty() {
        return Err(Error::Validation(format!(
            "interval {t} is too short for {}+{} step windows",
            cfg.input_steps, cfg.output_steps
        )));
    }

    let mut report = IntervalReport {
        interval: t,
        epoch_losses: Vec::new(),
        train_nodes: training.graph.node_order().to_vec(),
        subgraph: training.subgraph.clone(),
        ri_table: training.ri_table.clone(),
        buffer_history: Vec::new(),
        window_log: Vec::new(),
    };

    let memory_quota = (cfg.batch_size as f64 * cfg.memory_fraction).floor() as usize;
    let train_chunk = if cfg.use_buffer {
        (cfg.batch_size - memory_quota).max(1)
    } else {
        cfg.batch_size
    };

    for epoch in 1..=cfg.epochs {
        if first_interval && epoch == 1 && cfg.use_buffer {
            let mut rng = stream_rng(cfg.seed, &[TAG_BUFFER_INIT, t as u64]);
            buffer.fill_random(&pool, &mut rng);
        }
        let order = epoch_order(cfg, t, epoch, pool.len());
        if cfg.record_window_log {
            report
                .window_log
                .push(order.iter().map(|&i| pool[i].timestamp).collect());
        }

        let influence_phase = cfg.use_buffer && epoch >= cfg.pseudo_epochs.max(1);
        let sim_sets = if influence_phase && cfg.informative_buffer && !buffer.is_empty() {
            let seed = derive_seed(cfg.seed, &[TAG_SIM_SETS, t as u64, epoch as u64]);
            let (d_memory, d_train) =
                sample_simulated_test_sets(buffer, &pool, cfg.sim_set_size, seed)?;
            let (_, v_mem) = batch_loss_and_gradient(&state.params, &state.dims, &d_memory)?;
            let (_, v_train) = batch_loss_and_gradient(&state.params, &state.dims, &d_train)?;
            Some((v_mem, v_train))
        } else {
            None
        };

        let mut scored: BTreeMap<TimestampId, (f64, usize, TrainSample)> = BTreeMap::new();
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(train_chunk).enumerate() {
            let mut samples: Vec<TrainSample> =
                chunk.iter().map(|&i| pool[i].clone()).collect();
            if cfg.use_buffer && !buffer.is_empty() && memory_quota > 0 {
                let exclude: BTreeSet<TimestampId> =
                    samples.iter().map(|s| s.timestamp).collect();
                let mut rng = stream_rng(
                    cfg.seed,
                    &[TAG_MEMORY_DRAW, t as u64, epoch as u64, batch_idx as u64],
                );
                samples.extend(buffer.draw(memory_quota, &exclude, &mut rng));
            }

            let per_sample =
                per_sample_losses_and_gradients(&state.params, &state.dims, &samples)?;
            let p = state.dims.param_count();
            let mut base_loss = 0.0;
            let mut grad = vec![0.0; p];
            for (l, g) in &per_sample {
                base_loss += l;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let n = samples.len() as f64;
            base_loss /= n;
            for v in &mut grad {
                *v /= n;
            }

            if let Some((v_mem, v_train)) = &sim_sets {
                let sample_grads: Vec<Vec<f64>> =
                    per_sample.iter().map(|(_, g)| g.clone()).collect();
                let factor = hessian_factor(
                    state,
                    &sample_grads,
                    &samples,
                    cfg.hessian_mode,
                    cfg.damping,
                    cfg.exact_cap,
                )?;
                let i_train = influence_from_parts(v_train, &sample_grads, &factor)?;
                let i_memory = influence_from_parts(v_mem, &sample_grads, &factor)?;
                let merged = combine_influence(&i_train, &i_memory)?;
                for (sample, &score) in samples.iter().zip(&merged.i_star) {
                    let entry = scored
                        .entry(sample.timestamp)
                        .or_insert_with(|| (0.0, 0, sample.clone()));
                    entry.0 += score;
                    entry.1 += 1;
                }
            }

            let flat = state.flat_params();
            let (penalty, pgrad) = smoothing_penalty_and_grad(&flat, fisher, cfg);
            for (g, pg) in grad.iter_mut().zip(&pgrad) {
                *g += pg;
            }
            optimizer_step(state, &grad, cfg.lr)?;
            epoch_loss += base_loss + penalty;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches.max(1) as f64);

        if influence_phase {
            if cfg.informative_buffer {
                if !scored.is_empty() {
                    let candidates: Vec<(TrainSample, f64)> = scored
                        .into_values()
                        .map(|(sum, count, sample)| (sample, sum / count as f64))
                        .collect();
                    buffer.update(candidates, cfg.ranking);
                }
            } else {
                // Uncurated buffer: refill with a uniform random draw.
                let mut rng =
                    stream_rng(cfg.seed, &[TAG_RANDOM_BUFFER, t as u64, epoch as u64]);
                buffer.fill_random(&pool, &mut rng);
            }
            report.buffer_history.push((
                epoch,
                buffer
                    .entries()
                    .iter()
                    .map(|e| (e.sample.timestamp, e.score))
                    .collect(),
            ));
        }
    }

    // Fresh Fisher table anchored at the parameters that produced this
    // interval's final training loss.
    let fisher_pool: Vec<TrainSample> = if cfg.fisher_on_full_graph {
        let full_ctx = make_context(&curr.0, cfg)?;
        build_window_pool(
            t,
            full_ctx,
            &norm.normalize3(curr.1.values()),
            cfg.input_steps,
            cfg.output_steps,
        )
    } else {
        pool.clone()
    };
    let mut rng = stream_rng(cfg.seed, &[TAG_FISHER, t as u64, 0]);
    let mut indices: Vec<usize> = (0..fisher_pool.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(cfg.fisher_samples.max(1));
    indices.sort_unstable();
    let fisher_subset: Vec<TrainSample> =
        indices.into_iter().map(|i| fisher_pool[i].clone()).collect();
    let loss_fisher = fisher_information(state, &fisher_subset)?;

    let ri_fisher_vec = match (prev, cfg.use_ris) {
        (Some((g_prev, x_prev)), true) => {
            // Sensitivity over the persisting training nodes, on the
            // subgraph the model actually trained with.
            let scope: BTreeSet<NodeId> = match &training.subgraph {
                Some(s) => s.clone(),
                None => node_churn(g_prev, &curr.0).persisting,
            };
            let sub = induce_persisting_subgraph(g_prev, &curr.0, &scope)?;
            let operator = normalize_adjacency(sub.adjacency(), cfg.adjacency_mode)?;
            let rows: BTreeMap<NodeId, usize> = sub
                .node_order()
                .iter()
                .enumerate()
                .map(|(i, &n)| (n, i))
                .collect();
            let neighborhoods: RowNeighborhoods = sub
                .node_order()
                .iter()
                .map(|&v| {
                    let hood = crate::graph::k_hop_neighbors(&sub, v, cfg.k_hop)
                        .unwrap_or_default()
                        .into_iter()
                        .map(|u| rows[&u])
                        .collect();
                    (rows[&v], hood)
                })
                .collect();
            let crop = |x: &FeatureTensor| -> Array3<f64> {
                let mut out = Array3::zeros((
                    sub.node_count(),
                    x.feature_dim(),
                    x.steps(),
                ));
                for (i, &n) in sub.node_order().iter().enumerate() {
                    out.index_axis_mut(ndarray::Axis(0), i)
                        .assign(&x.series(n).expect("persisting node"));
                }
                norm.normalize3(&out)
            };
            ri_fisher(
                state,
                &operator,
                &crop(x_prev),
                &crop(&curr.1),
                &neighborhoods,
                cfg,
                t,
            )?
        }
        _ => vec![0.0; state.dims.param_count()],
    };

    let table = FisherTable {
        loss_fisher,
        ri_fisher: ri_fisher_vec,
        anchor: state.flat_params(),
    };
    table.validate(state.dims.param_count())?;
    Ok((report, table))
}

/// Plain sliding-window reference trainer: full graph, plain forecast loss,
/// no buffer, no penalties. Shares the window, shuffle, and optimizer code
/// paths with the continual loop, so the toggles-off configuration matches
/// it bit for bit.
pub fn plain_train_interval(
    state: &mut ModelState,
    curr: &(IntervalGraph, FeatureTensor),
    cfg: &TrainConfig,
    norm: &NormStats,
) -> Result<Vec<f64>> {
    let t = curr.0.interval_index();
    let ctx = make_context(&curr.0, cfg)?;
    let pool = build_window_pool(
        t,
        ctx,
        &norm.normalize3(curr.1.values()),
        cfg.input_steps,
        cfg.output_steps,
    );
    if pool.is_empty() {
        return Err(Error::Validation(format!("interval {t} too short")));
    }
    let mut losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg, t, epoch, pool.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<TrainSample> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let per_sample =
                per_sample_losses_and_gradients(&state.params, &state.dims, &samples)?;
            let p = state.dims.param_count();
            let mut base_loss = 0.0;
            let mut grad = vec![0.0; p];
            for (l, g) in &per_sample {
                base_loss += l;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let n = samples.len() as f64;
            base_loss /= n;
            for v in &mut grad {
                *v /= n;
            }
            optimizer_step(state, &grad, cfg.lr)?;
            epoch_loss += base_loss;
            batches += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(losses)
}

/// Everything a continual run produces.
#[derive(Debug)]
pub struct ContinualOutcome {
    pub records: Vec<crate::eval::MetricRecord>,
    pub reports: Vec<IntervalReport>,
    pub final_state: ModelState,
    pub norm: NormStats,
}

/// The full procedure: for each interval t in 1..T-1 (0-based: 0..T-2),
/// train on interval t and evaluate inductively on interval t+1.
pub fn run_continual(
    seq: &DynamicGraphSequence,
    cfg: &TrainConfig,
    model_tag: &str,
) -> Result<ContinualOutcome> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(Error::Argument(
            "continual training needs at least two intervals".into(),
        ));
    }
    let dims = cfg.model_dims(seq.feature_dim());
    let mut state = ModelState::init(dims, cfg.seed)?;
    let mut buffer = MemoryBuffer::new(cfg.buffer_capacity);
    let mut fisher: Option<FisherTable> = None;
    let norm = NormStats::from_values(seq.interval(0).1.values().iter());

    let mut records = Vec::new();
    let mut reports = Vec::new();
    for t in 0..seq.len() - 1 {
        let prev = if t > 0 { Some(seq.interval(t - 1)) } else { None };
        let (report, table) = train_interval(
            &mut state,
            prev,
            seq.interval(t),
            &mut buffer,
            fisher.as_ref(),
            cfg,
            &norm,
            t == 0,
        )?;
        fisher = Some(table);
        reports.push(report);

        let test = seq.interval(t + 1);
        let churn = node_churn(&seq.interval(t).0, &test.0);
        records.extend(crate::eval::evaluate_on_interval(
            &state, test, &churn, cfg, &norm, model_tag,
        )?);
    }
    Ok(ContinualOutcome {
        records,
        reports,
        final_state: state,
        norm,
    })
}
