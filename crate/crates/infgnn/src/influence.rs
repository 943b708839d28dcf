//! Influence-curated temporal memory buffer.
//!
//! After a pseudo-update phase, each batch sample's effect on a simulated
//! test set is scored with a damped Hessian-inverse vector product. Scores
//! against a memory-sampled set and a train-sampled set are merged by a
//! closed-form interpolation weight, and the buffer keeps the top-scoring
//! timestamps at fixed capacity.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    batch_hessian_vector_product, batch_loss_and_gradient, optimizer_step,
    per_sample_losses_and_gradients, Batch, ModelState, TimestampId, TrainSample,
};
use crate::rngutil::{stream_rng, TAG_SIM_SETS};

/// Default damping added to the Hessian diagonal before inversion.
pub const DEFAULT_DAMPING: f64 = 1e-3;

/// Largest parameter count for which the exact Hessian may be materialized.
pub const DEFAULT_EXACT_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Materialize the full damped Hessian via exact Hessian-vector products.
    Exact,
    /// Damped diagonal of the squared-gradient accumulator.
    #[default]
    Diagonal,
}

/// Whether buffer ranking uses the signed score or its magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    #[default]
    Signed,
    Magnitude,
}

/// Plain optimization for `epochs` passes over the batch stream: no
/// influence computation, no buffer mutation.
pub fn pseudo_update(
    state: &mut ModelState,
    stream: &[Batch],
    epochs: usize,
    lr: f64,
) -> Result<()> {
    for _ in 0..epochs {
        for batch in stream {
            let (_, grads) = batch_loss_and_gradient(&state.params, &state.dims, &batch.samples)?;
            optimizer_step(state, &grads, lr)?;
        }
    }
    Ok(())
}

/// The Hessian factor of an influence computation.
pub enum HessianFactor {
    /// Dense damped Hessian (damping already added).
    Dense(Array2<f64>),
    /// Damped diagonal (damping already added).
    Diagonal(Vec<f64>),
}

/// Score each batch sample against a test-set gradient: the negated damped
/// Hessian-inverse product between the test gradient and the sample's own
/// gradient.
pub fn influence_from_parts(
    test_grad: &[f64],
    sample_grads: &[Vec<f64>],
    hessian: &HessianFactor,
) -> Result<Vec<f64>> {
    let solved = match hessian {
        HessianFactor::Dense(h) => {
            if h.nrows() != test_grad.len() {
                return Err(Error::Argument("Hessian and gradient sizes differ".into()));
            }
            solve_dense(h.clone(), test_grad.to_vec())?
        }
        HessianFactor::Diagonal(diag) => {
            if diag.len() != test_grad.len() {
                return Err(Error::Argument("diagonal and gradient sizes differ".into()));
            }
            test_grad
                .iter()
                .zip(diag)
                .map(|(&g, &d)| g / d)
                .collect()
        }
    };
    Ok(sample_grads
        .iter()
        .map(|g| -solved.iter().zip(g).map(|(&a, &b)| a * b).sum::<f64>())
        .collect())
}

/// Build the damped Hessian factor of the batch-mean loss at the current
/// parameters.
pub fn hessian_factor(
    state: &ModelState,
    batch_grads: &[Vec<f64>],
    batch: &[TrainSample],
    mode: HessianMode,
    damping: f64,
    exact_cap: usize,
) -> Result<HessianFactor> {
    let p = state.dims.param_count();
    match mode {
        HessianMode::Diagonal => {
            let mut diag = vec![0.0; p];
            for g in batch_grads {
                for (acc, &v) in diag.iter_mut().zip(g) {
                    *acc += v * v;
                }
            }
            let n = batch_grads.len().max(1) as f64;
            for v in &mut diag {
                *v = *v / n + damping;
            }
            Ok(HessianFactor::Diagonal(diag))
        }
        HessianMode::Exact => {
            if p > exact_cap {
                return Err(Error::Config(format!(
                    "exact Hessian requested for {p} parameters, cap is {exact_cap}"
                )));
            }
            let mut h = Array2::zeros((p, p));
            for j in 0..p {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                let col = batch_hessian_vector_product(&state.params, &state.dims, batch, &e)?;
                for i in 0..p {
                    h[[i, j]] = col[i];
                }
            }
            for i in 0..p {
                h[[i, i]] += damping;
            }
            Ok(HessianFactor::Dense(h))
        }
    }
}

/// Influence of every sample in `b` on the loss over `d`.
pub fn influence_scores(
    state: &ModelState,
    b: &Batch,
    d: &Batch,
    mode: HessianMode,
    damping: f64,
    exact_cap: usize,
) -> Result<Vec<f64>> {
    if b.is_empty() || d.is_empty() {
        return Err(Error::Argument("influence needs nonempty batches".into()));
    }
    let sample_grads: Vec<Vec<f64>> =
        per_sample_losses_and_gradients(&state.params, &state.dims, &b.samples)?
            .into_iter()
            .map(|(_, g)| g)
            .collect();
    let (_, d_grad) = batch_loss_and_gradient(&state.params, &state.dims, &d.samples)?;
    let factor = hessian_factor(state, &sample_grads, &b.samples, mode, damping, exact_cap)?;
    influence_from_parts(&d_grad, &sample_grads, &factor)
}

/// Merged influence scores and the interpolation weight behind them.
#[derive(Debug, Clone)]
pub struct InfluenceReport {
    pub i_train: Vec<f64>,
    pub i_memory: Vec<f64>,
    pub gamma: f64,
    pub i_star: Vec<f64>,
}

/// Merge train-side and memory-side scores: the weight projects the train
/// scores onto the difference direction, clamped to [0, 1]; equal inputs take
/// the train side by convention.
pub fn combine_influence(i_train: &[f64], i_memory: &[f64]) -> Result<InfluenceReport> {
    if i_train.len() != i_memory.len() {
        return Err(Error::Argument(format!(
            "score lengths differ: {} vs {}",
            i_train.len(),
            i_memory.len()
        )));
    }
    let diff_sq: f64 = i_train
        .iter()
        .zip(i_memory)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let gamma = if diff_sq == 0.0 {
        1.0
    } else {
        let numer: f64 = i_train
            .iter()
            .zip(i_memory)
            .map(|(&a, &b)| (a - b) * a)
            .sum();
        (numer / diff_sq).clamp(0.0, 1.0)
    };
    let i_star: Vec<f64> = i_train
        .iter()
        .zip(i_memory)
        .map(|(&a, &b)| gamma * a + (1.0 - gamma) * b)
        .collect();
    Ok(InfluenceReport {
        i_train: i_train.to_vec(),
        i_memory: i_memory.to_vec(),
        gamma,
        i_star,
    })
}

/// A retained timestamp with its window and last influence score.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub sample: TrainSample,
    pub score: f64,
}

/// Fixed-capacity store of the most influential timestamps.
#[derive(Debug, Clone, Default)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn contains(&self, ts: TimestampId) -> bool {
        self.entries.iter().any(|e| e.sample.timestamp == ts)
    }

    /// Merge scored candidates with the current entries (candidates win on
    /// duplicate timestamps), rank descending, truncate to capacity. Ties
    /// break toward the older timestamp.
    pub fn update(&mut self, scored: Vec<(TrainSample, f64)>, ranking: RankingMode) {
        if scored.is_empty() {
            return;
        }
        let mut merged: std::collections::BTreeMap<TimestampId, BufferEntry> = self
            .entries
            .drain(..)
            .map(|e| (e.sample.timestamp, e))
            .collect();
        for (sample, score) in scored {
            merged.insert(sample.timestamp, BufferEntry { sample, score });
        }
        let mut entries: Vec<BufferEntry> = merged.into_values().collect();
        let key = |e: &BufferEntry| match ranking {
            RankingMode::Signed => e.score,
            RankingMode::Magnitude => e.score.abs(),
        };
        entries.sort_by(|a, b| {
            key(b)
                .partial_cmp(&key(a))
                .unwrap()
                .then(a.sample.timestamp.cmp(&b.sample.timestamp))
        });
        entries.truncate(self.capacity);
        self.entries = entries;
    }

    /// Replace the contents with a uniform random draw from the pool
    /// (the uncurated-buffer ablation and the initial fill).
    pub fn fill_random(&mut self, pool: &[TrainSample], rng: &mut impl Rng) {
        self.entries.clear();
        if pool.is_empty() || self.capacity == 0 {
            return;
        }
        let take = self.capacity.min(pool.len());
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(rng);
        indices.truncate(take);
        indices.sort_unstable();
        self.entries = indices
            .into_iter()
            .map(|i| BufferEntry {
                sample: pool[i].clone(),
                score: 0.0,
            })
            .collect();
    }

    /// Draw up to `n` entries without replacement, skipping timestamps that
    /// are already taken.
    pub fn draw(
        &self,
        n: usize,
        exclude: &std::collections::BTreeSet<TimestampId>,
        rng: &mut impl Rng,
    ) -> Vec<TrainSample> {
        let eligible: Vec<&BufferEntry> = self
            .entries
            .iter()
            .filter(|e| !exclude.contains(&e.sample.timestamp))
            .collect();
        let take = n.min(eligible.len());
        let mut indices: Vec<usize> = (0..eligible.len()).collect();
        indices.shuffle(rng);
        indices.truncate(take);
        indices.sort_unstable();
        indices
            .into_iter()
            .map(|i| eligible[i].sample.clone())
            .collect()
    }
}

/// Uniform draw of `n` samples, without replacement when the pool is large
/// enough, with replacement otherwise.
fn draw_simulated(pool: &[TrainSample], n: usize, rng: &mut impl Rng) -> Vec<TrainSample> {
    if pool.len() >= n {
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(rng);
        indices.truncate(n);
        indices.sort_unstable();
        indices.into_iter().map(|i| pool[i].clone()).collect()
    } else {
        (0..n)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect()
    }
}

/// Simulated test sets standing in for the unavailable true test set: one
/// drawn from the memory buffer, one from the seen training pool.
pub fn sample_simulated_test_sets(
    buffer: &MemoryBuffer,
    seen_train: &[TrainSample],
    size: usize,
    seed: u64,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    if buffer.is_empty() || seen_train.is_empty() {
        return Err(Error::Argument(
            "simulated test sets need nonempty pools".into(),
        ));
    }
    let mut rng = stream_rng(seed, &[TAG_SIM_SETS]);
    let memory_pool: Vec<TrainSample> =
        buffer.entries.iter().map(|e| e.sample.clone()).collect();
    let d_memory = draw_simulated(&memory_pool, size, &mut rng);
    let d_train = draw_simulated(seen_train, size, &mut rng);
    Ok((d_memory, d_train))
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Array2<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::Argument("system dimensions differ".into()));
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[[row, col]].abs() > a[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if a[[pivot, col]].abs() < 1e-300 {
            return Err(Error::Numerical(format!(
                "singular damped system at column {col}"
            )));
        }
        if pivot != col {
            for k in 0..n {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[pivot, k]];
                a[[pivot, k]] = tmp;
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = a[[row, col]] / a[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[[row, k]] -= factor * a[[col, k]];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[[row, k]] * x[k];
        }
        x[row] = acc / a[[row, row]];
    }
    Ok(x)
}
