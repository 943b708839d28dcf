//! Differentiable Relation Importance over model predictions.
//!
//! Hard binning has zero gradient almost everywhere, so the RI smoothing
//! penalty recomputes the RI fraction on predicted windows with a soft
//! histogram: every value spreads over the bins through a Gaussian kernel
//! (bandwidth = bandwidth_factor times the bin width, per-value normalized),
//! and the divergences become smooth functions of the predictions. Bin grids
//! are planned once from the predictions at the evaluation point and then
//! held fixed, which keeps the scalar smooth in the parameters.

use std::collections::BTreeMap;

use ndarray::Array3;

use crate::distrib::SMOOTHING_ALPHA;
use crate::error::{Error, Result};
use crate::ri::DENOMINATOR_FLOOR;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SoftRiConfig {
    pub bins: usize,
    /// Kernel bandwidth as a multiple of the bin width.
    pub bandwidth_factor: f64,
}

impl Default for SoftRiConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            // Calibrated so the soft fraction stays within 10% of the hard
            // one at the window level; wider kernels smear 12-sample
            // histograms far outside that band.
            bandwidth_factor: 0.1,
        }
    }
}

/// Neighborhood structure at the prediction level: rows into the prediction
/// arrays rather than node ids.
pub type RowNeighborhoods = Vec<(usize, Vec<usize>)>;

/// Fixed bin ranges per comparison, planned from the current predictions.
#[derive(Debug, Clone)]
pub struct GridPlan {
    /// Range for node row v compared against itself across intervals.
    pub temporal: BTreeMap<usize, (f64, f64)>,
    /// Range for rows (v, u) in the current interval, keyed (low, high).
    pub cross_curr: BTreeMap<(usize, usize), (f64, f64)>,
    /// Same for the previous interval.
    pub cross_prev: BTreeMap<(usize, usize), (f64, f64)>,
}

fn pair_key(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn row_values(pred: &Array3<f64>, row: usize) -> Vec<f64> {
    pred.index_axis(ndarray::Axis(0), row).iter().copied().collect()
}

fn union_range(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in xs.iter().chain(ys) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Plan every bin range needed to score the given neighborhoods.
pub fn plan_grids(
    pred_prev: &Array3<f64>,
    pred_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
) -> GridPlan {
    let mut plan = GridPlan {
        temporal: BTreeMap::new(),
        cross_curr: BTreeMap::new(),
        cross_prev: BTreeMap::new(),
    };
    let want_temporal = |row: usize, plan: &mut GridPlan| {
        plan.temporal.entry(row).or_insert_with(|| {
            union_range(&row_values(pred_prev, row), &row_values(pred_curr, row))
        });
    };
    for (v, hood) in neighborhoods {
        want_temporal(*v, &mut plan);
        for &u in hood {
            want_temporal(u, &mut plan);
            let key = pair_key(*v, u);
            plan.cross_curr.entry(key).or_insert_with(|| {
                union_range(&row_values(pred_curr, key.0), &row_values(pred_curr, key.1))
            });
            plan.cross_prev.entry(key).or_insert_with(|| {
                union_range(&row_values(pred_prev, key.0), &row_values(pred_prev, key.1))
            });
        }
    }
    plan
}

/// Per-value softmax assignment over bin centers.
struct SoftAssignment {
    /// assignment[j][b]: weight of value j on bin b; rows sum to 1.
    weights: Vec<Vec<f64>>,
    /// d(score_b)/dx for each value and bin: -(x - c_b)/sigma^2.
    score_grad: Vec<Vec<f64>>,
}

fn soft_assign(values: &[f64], lo: f64, hi: f64, cfg: &SoftRiConfig) -> SoftAssignment {
    let b = cfg.bins;
    let width = (hi - lo) / b as f64;
    let sigma = cfg.bandwidth_factor * width;
    let centers: Vec<f64> = (0..b).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::with_capacity(values.len());
    let mut score_grad = Vec::with_capacity(values.len());
    for &x in values {
        let scores: Vec<f64> = centers
            .iter()
            .map(|&c| -(x - c) * (x - c) * inv_two_sigma_sq)
            .collect();
        // Stabilized softmax.
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        weights.push(exps.iter().map(|&e| e / total).collect());
        score_grad.push(
            centers
                .iter()
                .map(|&c| -(x - c) * 2.0 * inv_two_sigma_sq)
                .collect(),
        );
    }
    SoftAssignment {
        weights,
        score_grad,
    }
}

fn soft_mass(assign: &SoftAssignment, bins: usize) -> Vec<f64> {
    let n = assign.weights.len() as f64;
    let denom = n + bins as f64 * SMOOTHING_ALPHA;
    let mut mass = vec![SMOOTHING_ALPHA / denom; bins];
    for row in &assign.weights {
        for (m, w) in mass.iter_mut().zip(row) {
            *m += w / denom;
        }
    }
    mass
}

/// Soft JSD between two value sets on a fixed grid, with exact gradients
/// with respect to every input value. A zero-width grid short-circuits to
/// zero with zero gradients.
pub fn soft_jsd_with_grad(
    xs: &[f64],
    ys: &[f64],
    grid: (f64, f64),
    cfg: &SoftRiConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Argument("empty value set".into()));
    }
    let (lo, hi) = grid;
    if !(lo < hi) {
        return Ok((0.0, vec![0.0; xs.len()], vec![0.0; ys.len()]));
    }
    let ax = soft_assign(xs, lo, hi, cfg);
    let ay = soft_assign(ys, lo, hi, cfg);
    let p = soft_mass(&ax, cfg.bins);
    let q = soft_mass(&ay, cfg.bins);
    let mid: Vec<f64> = p.iter().zip(&q).map(|(&a, &b)| (a + b) / 2.0).collect();
    let mut value = 0.0;
    for b in 0..cfg.bins {
        value += 0.5 * p[b] * (p[b] / mid[b]).ln() + 0.5 * q[b] * (q[b] / mid[b]).ln();
    }

    // dJSD/dp_b reduces to 0.5*ln(p_b/m_b) because the +1 terms from the
    // product rule cancel against the midpoint's own dependence on p_b.
    let dj_dp: Vec<f64> = p
        .iter()
        .zip(&mid)
        .map(|(&pb, &mb)| 0.5 * (pb / mb).ln())
        .collect();
    let dj_dq: Vec<f64> = q
        .iter()
        .zip(&mid)
        .map(|(&qb, &mb)| 0.5 * (qb / mb).ln())
        .collect();

    let value_grads = |assign: &SoftAssignment, dj: &[f64], n_values: usize| -> Vec<f64> {
        let denom = n_values as f64 + cfg.bins as f64 * SMOOTHING_ALPHA;
        assign
            .weights
            .iter()
            .zip(&assign.score_grad)
            .map(|(w, sg)| {
                // Softmax Jacobian: da_b/dx = a_b * (s'_b - sum_b' a_b' s'_b').
                let mean_sg: f64 = w.iter().zip(sg).map(|(&a, &s)| a * s).sum();
                let mut acc = 0.0;
                for b in 0..cfg.bins {
                    acc += dj[b] * w[b] * (sg[b] - mean_sg) / denom;
                }
                acc
            })
            .collect()
    };
    let gx = value_grads(&ax, &dj_dp, xs.len());
    let gy = value_grads(&ay, &dj_dq, ys.len());
    Ok((value, gx, gy))
}

/// Soft JSD value only.
pub fn soft_jsd(xs: &[f64], ys: &[f64], grid: (f64, f64), cfg: &SoftRiConfig) -> Result<f64> {
    soft_jsd_with_grad(xs, ys, grid, cfg).map(|(v, _, _)| v)
}

/// Hard-histogram JSD on the same fixed grid, for soft-vs-hard comparisons.
pub fn hard_jsd(xs: &[f64], ys: &[f64], grid: (f64, f64), bins: usize) -> Result<f64> {
    let (lo, hi) = grid;
    if !(lo < hi) {
        return Ok(0.0);
    }
    let p = crate::distrib::build_histogram(xs, bins, (lo, hi))?;
    let q = crate::distrib::build_histogram(ys, bins, (lo, hi))?;
    crate::distrib::jsd(&p, &q)
}

/// Mean subgraph RI over predicted windows, with exact gradients with
/// respect to both prediction arrays.
pub fn soft_ri_with_prediction_grad(
    pred_prev: &Array3<f64>,
    pred_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
    grids: &GridPlan,
    cfg: &SoftRiConfig,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    if pred_prev.shape() != pred_curr.shape() {
        return Err(Error::Argument("prediction shapes differ".into()));
    }
    if neighborhoods.is_empty() {
        return Err(Error::Argument("no nodes to score".into()));
    }

    // Evaluate each distinct divergence once, keeping its value gradients.
    struct PairEval {
        value: f64,
        gx: Vec<f64>,
        gy: Vec<f64>,
    }
    let mut temporal: BTreeMap<usize, PairEval> = BTreeMap::new();
    let mut cross_curr: BTreeMap<(usize, usize), PairEval> = BTreeMap::new();
    let mut cross_prev: BTreeMap<(usize, usize), PairEval> = BTreeMap::new();
    for (v, hood) in neighborhoods {
        for row in std::iter::once(*v).chain(hood.iter().copied()) {
            if !temporal.contains_key(&row) {
                let xs = row_values(pred_prev, row);
                let ys = row_values(pred_curr, row);
                let (value, gx, gy) =
                    soft_jsd_with_grad(&xs, &ys, grids.temporal[&row], cfg)?;
                temporal.insert(row, PairEval { value, gx, gy });
            }
        }
        for &u in hood {
            let key = pair_key(*v, u);
            if !cross_curr.contains_key(&key) {
                let xs = row_values(pred_curr, key.0);
                let ys = row_values(pred_curr, key.1);
                let (value, gx, gy) =
                    soft_jsd_with_grad(&xs, &ys, grids.cross_curr[&key], cfg)?;
                cross_curr.insert(key, PairEval { value, gx, gy });
            }
            if !cross_prev.contains_key(&key) {
                let xs = row_values(pred_prev, key.0);
                let ys = row_values(pred_prev, key.1);
                let (value, gx, gy) =
                    soft_jsd_with_grad(&xs, &ys, grids.cross_prev[&key], cfg)?;
                cross_prev.insert(key, PairEval { value, gx, gy });
            }
        }
    }

    // Accumulate the fraction and its divergence-level sensitivities, then
    // push those through each pair's value gradients.
    let mut dtemporal: BTreeMap<usize, f64> = BTreeMap::new();
    let mut dcross_curr: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut dcross_prev: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let scale = 1.0 / neighborhoods.len() as f64;
    let mut total = 0.0;
    for (v, hood) in neighborhoods {
        if hood.is_empty() {
            continue;
        }
        let t_v = temporal[v].value;
        for &u in hood {
            let key = pair_key(*v, u);
            let t_u = temporal[&u].value;
            let raw_c = cross_curr[&key].value;
            let raw_p = cross_prev[&key].value;
            let d1 = raw_c.max(DENOMINATOR_FLOOR);
            let d2 = raw_p.max(DENOMINATOR_FLOOR);
            let term = t_u * t_v / (d1 * d2);
            total += scale * term;
            *dtemporal.entry(u).or_default() += scale * t_v / (d1 * d2);
            *dtemporal.entry(*v).or_default() += scale * t_u / (d1 * d2);
            if raw_c > DENOMINATOR_FLOOR {
                *dcross_curr.entry(key).or_default() += scale * (-term / d1);
            }
            if raw_p > DENOMINATOR_FLOOR {
                *dcross_prev.entry(key).or_default() += scale * (-term / d2);
            }
        }
    }

    let shape = pred_prev.raw_dim();
    let per_row = pred_prev.len() / pred_prev.shape()[0];
    let mut dprev = Array3::zeros(shape);
    let mut dcurr = Array3::zeros(pred_curr.raw_dim());
    let add_row = |arr: &mut Array3<f64>, row: usize, grad: &[f64], weight: f64| {
        let mut slice = arr.index_axis_mut(ndarray::Axis(0), row);
        let flat = slice.as_slice_mut().expect("contiguous row");
        for i in 0..per_row {
            flat[i] += weight * grad[i];
        }
    };
    for (row, sensitivity) in &dtemporal {
        let eval = &temporal[row];
        add_row(&mut dprev, *row, &eval.gx, *sensitivity);
        add_row(&mut dcurr, *row, &eval.gy, *sensitivity);
    }
    for (key, sensitivity) in &dcross_curr {
        let eval = &cross_curr[key];
        add_row(&mut dcurr, key.0, &eval.gx, *sensitivity);
        add_row(&mut dcurr, key.1, &eval.gy, *sensitivity);
    }
    for (key, sensitivity) in &dcross_prev {
        let eval = &cross_prev[key];
        add_row(&mut dprev, key.0, &eval.gx, *sensitivity);
        add_row(&mut dprev, key.1, &eval.gy, *sensitivity);
    }
    Ok((total, dprev, dcurr))
}

/// Hard-histogram RI on predictions with the same grids and floors, as the
/// reference the soft version is checked against.
pub fn hard_ri_on_predictions(
    pred_prev: &Array3<f64>,
    pred_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
    grids: &GridPlan,
    bins: usize,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (v, hood) in neighborhoods {
        if hood.is_empty() {
            continue;
        }
        let t = |row: usize| -> Result<f64> {
            hard_jsd(
                &row_values(pred_prev, row),
                &row_values(pred_curr, row),
                grids.temporal[&row],
                bins,
            )
        };
        let t_v = t(*v)?;
        let mut sum = 0.0;
        for &u in hood {
            let key = pair_key(*v, u);
            let c = hard_jsd(
                &row_values(pred_curr, key.0),
                &row_values(pred_curr, key.1),
                grids.cross_curr[&key],
                bins,
            )?;
            let p = hard_jsd(
                &row_values(pred_prev, key.0),
                &row_values(pred_prev, key.1),
                grids.cross_prev[&key],
                bins,
            )?;
            sum += t(u)? * t_v / (c.max(DENOMINATOR_FLOOR) * p.max(DENOMINATOR_FLOOR));
        }
        out.insert(*v, sum);
    }
    Ok(out)
}

/// Soft RI per node (values only), on the same grids.
pub fn soft_ri_per_node(
    pred_prev: &Array3<f64>,
    pred_curr: &Array3<f64>,
    neighborhoods: &RowNeighborhoods,
    grids: &GridPlan,
    cfg: &SoftRiConfig,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (v, hood) in neighborhoods {
        if hood.is_empty() {
            continue;
        }
        let t = |row: usize| -> Result<f64> {
            soft_jsd(
                &row_values(pred_prev, row),
                &row_values(pred_curr, row),
                grids.temporal[&row],
                cfg,
            )
        };
        let t_v = t(*v)?;
        let mut sum = 0.0;
        for &u in hood {
            let key = pair_key(*v, u);
            let c = soft_jsd(
                &row_values(pred_curr, key.0),
                &row_values(pred_curr, key.1),
                grids.cross_curr[&key],
                cfg,
            )?;
            let p = soft_jsd(
                &row_values(pred_prev, key.0),
                &row_values(pred_prev, key.1),
                grids.cross_prev[&key],
                cfg,
            )?;
            sum += t(u)? * t_v / (c.max(DENOMINATOR_FLOOR) * p.max(DENOMINATOR_FLOOR));
        }
        out.insert(*v, sum);
    }
    Ok(out)
}
