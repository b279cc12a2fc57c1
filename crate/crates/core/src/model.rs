//! Single-layer GRU session recommender with tied output weights.
//!
//! Items are scored by `logits = h · Eᵀ` over embedding rows `1..=|V|`, so the
//! session state and item embeddings share one `d`-dimensional space. All
//! gradients are computed analytically with backpropagation through time.
//!
//! Flat parameter layout, in order:
//!
//! | block             | shape        |
//! |-------------------|--------------|
//! | `E`               | `(|V|+1) × d` |
//! | `W_z, W_r, W_h`   | `d × d` each |
//! | `U_z, U_r, U_h`   | `d × d` each |
//! | `b_z, b_r, b_h`   | `d` each     |
//!
//! Matrices are row-major (`out × in`). Row 0 of `E` is the padding row.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, ItemId, Session, UnlearnSample};

/// Samples per reduction chunk. Fixed so that results do not depend on the
/// number of worker threads.
const REDUCE_CHUNK: usize = 8;

/// Chunk size for the three-task reduction, which carries three buffers.
const TASK_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub embed_dim: usize,
    pub max_prefix_len: usize,
    pub learn_rate: f64,
    /// Step size for unlearning runs; falls back to `learn_rate`.
    pub unlearn_rate: Option<f64>,
    pub train_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Uniform init half-width; `None` means `1/sqrt(d)`.
    pub init_scale: Option<f64>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            embed_dim: 64,
            max_prefix_len: 10,
            learn_rate: 1e-3,
            unlearn_rate: None,
            train_batch: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_scale: None,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 {
            return Err(ModelError::Config("embed_dim must be >= 1".into()));
        }
        if self.max_prefix_len == 0 {
            return Err(ModelError::Config("max_prefix_len must be >= 1".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learn_rate) || !self.unlearn_rate.map_or(true, positive) {
            return Err(ModelError::Config("learning rates must be > 0".into()));
        }
        if self.train_batch == 0 {
            return Err(ModelError::Config("train_batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.eps) {
            return Err(ModelError::Config("adam betas must lie in [0,1), eps > 0".into()));
        }
        Ok(())
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale.unwrap_or(1.0 / (self.embed_dim as f64).sqrt())
    }

    pub fn unlearn_rate(&self) -> f64 {
        self.unlearn_rate.unwrap_or(self.learn_rate)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("kl loss needs reference parameters")]
    MissingReference,
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Model parameters as one flat vector with structured accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    item_count: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Gate order inside the W/U/b blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Update = 0,
    Reset = 1,
    Candidate = 2,
}

impl Params {
    pub fn flat_len(item_count: usize, dim: usize) -> usize {
        (item_count + 1) * dim + 6 * dim * dim + 3 * dim
    }

    pub fn zeros(item_count: usize, dim: usize) -> Self {
        Params {
            item_count,
            dim,
            data: vec![0.0; Self::flat_len(item_count, dim)],
        }
    }

    pub fn from_flat(item_count: usize, dim: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        let want = Self::flat_len(item_count, dim);
        if data.len() != want {
            return Err(ModelError::Shape(format!("flat length {} != {}", data.len(), want)));
        }
        Ok(Params { item_count, dim, data })
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    fn emb_len(&self) -> usize {
        (self.item_count + 1) * self.dim
    }

    /// Embedding row of `item` (row 0 is padding).
    pub fn embedding(&self, item: ItemId) -> &[f64] {
        let d = self.dim;
        &self.data[item.index() * d..(item.index() + 1) * d]
    }

    /// Rows `1..=|V|` of the embedding table, contiguous.
    pub fn item_embeddings(&self) -> &[f64] {
        &self.data[self.dim..self.emb_len()]
    }

    fn w_offset(&self, gate: Gate) -> usize {
        self.emb_len() + gate as usize * self.dim * self.dim
    }

    fn u_offset(&self, gate: Gate) -> usize {
        self.emb_len() + (3 + gate as usize) * self.dim * self.dim
    }

    fn b_offset(&self, gate: Gate) -> usize {
        self.emb_len() + 6 * self.dim * self.dim + gate as usize * self.dim
    }

    pub fn input_weights(&self, gate: Gate) -> &[f64] {
        let o = self.w_offset(gate);
        &self.data[o..o + self.dim * self.dim]
    }

    pub fn hidden_weights(&self, gate: Gate) -> &[f64] {
        let o = self.u_offset(gate);
        &self.data[o..o + self.dim * self.dim]
    }

    pub fn bias(&self, gate: Gate) -> &[f64] {
        let o = self.b_offset(gate);
        &self.data[o..o + self.dim]
    }

    pub fn padding_row_is_zero(&self) -> bool {
        self.data[..self.dim].iter().all(|&v| v == 0.0)
    }
}

/// Flat gradient aligned with [`Params`] ordering.
pub type GradientVector = Vec<f64>;

/// Uniform `(-s, s)` initialisation with a zeroed padding row.
pub fn init_params(hp: &HyperParams, item_count: usize) -> Params {
    assert!(item_count >= 1, "item_count must be >= 1");
    let mut params = Params::zeros(item_count, hp.embed_dim);
    let scale = hp.init_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let d = hp.embed_dim;
    for v in params.data[d..].iter_mut() {
        *v = rng.random_range(-scale..scale);
    }
    params
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    /// Index `i` scores item `i + 1`.
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ScoreVector {
    pub fn log_prob(&self, item: ItemId) -> f64 {
        self.log_probs[item.index() - 1]
    }

    pub fn prob(&self, item: ItemId) -> f64 {
        self.log_prob(item).exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
/// Four independent accumulators so the sum is not one serial dependency chain.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += M v` for row-major `M` (`d × d`).
#[inline]
fn matvec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (row, o) in m.chunks_exact(d).zip(out.iter_mut()) {
        *o += dot(row, v);
    }
}

/// `out += Mᵀ v`.
#[inline]
fn matvec_t_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = out.len();
    for (row, &vi) in m.chunks_exact(d).zip(v) {
        if vi != 0.0 {
            for (o, &mij) in out.iter_mut().zip(row) {
                *o += mij * vi;
            }
        }
    }
}

/// `m += a bᵀ`.
#[inline]
fn outer_add(m: &mut [f64], a: &[f64], b: &[f64]) {
    let d = b.len();
    for (row, &ai) in m.chunks_exact_mut(d).zip(a) {
        if ai != 0.0 {
            for (mij, &bj) in row.iter_mut().zip(b) {
                *mij += ai * bj;
            }
        }
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

struct StepCache {
    item: ItemId,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
}

/// Recurrence trace over one window of items.
struct Trace {
    steps: Vec<StepCache>,
    /// `states[k]` is the hidden state after consuming `k + 1` items.
    states: Vec<Vec<f64>>,
}

impl Trace {
    fn final_state(&self, dim: usize) -> Vec<f64> {
        self.states.last().cloned().unwrap_or_else(|| vec![0.0; dim])
    }
}

fn run_window(params: &Params, items: &[ItemId]) -> Trace {
    let d = params.dim;
    let mut h = vec![0.0; d];
    let mut steps = Vec::with_capacity(items.len());
    let mut states = Vec::with_capacity(items.len());
    for &item in items {
        let x = params.embedding(item);
        let mut z = params.bias(Gate::Update).to_vec();
        matvec_add(params.input_weights(Gate::Update), x, &mut z);
        matvec_add(params.hidden_weights(Gate::Update), &h, &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut r = params.bias(Gate::Reset).to_vec();
        matvec_add(params.input_weights(Gate::Reset), x, &mut r);
        matvec_add(params.hidden_weights(Gate::Reset), &h, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));

        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let mut c = params.bias(Gate::Candidate).to_vec();
        matvec_add(params.input_weights(Gate::Candidate), x, &mut c);
        matvec_add(params.hidden_weights(Gate::Candidate), &rh, &mut c);
        c.iter_mut().for_each(|v| *v = v.tanh());

        let h_new: Vec<f64> = (0..d).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
        steps.push(StepCache {
            item,
            h_prev: std::mem::replace(&mut h, h_new.clone()),
            z,
            r,
            c,
        });
        states.push(h_new);
    }
    Trace { steps, states }
}

/// Backpropagation through time. `dh_at[k]` is the loss gradient arriving at
/// the state after step `k` from outside the recurrence.
fn backward_window(params: &Params, trace: &Trace, dh_at: &[Option<Vec<f64>>], grad: &mut [f64]) {
    let d = params.dim;
    let mut dh = vec![0.0; d];
    let mut da_z = vec![0.0; d];
    let mut da_r = vec![0.0; d];
    let mut da_h = vec![0.0; d];
    let (mut dh_prev, mut drh, mut rh) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for (k, step) in trace.steps.iter().enumerate().rev() {
        if let Some(ext) = &dh_at[k] {
            dh.iter_mut().zip(ext).for_each(|(a, b)| *a += b);
        }
        for i in 0..d {
            let (z, c, hp) = (step.z[i], step.c[i], step.h_prev[i]);
            da_z[i] = dh[i] * (c - hp) * z * (1.0 - z);
            da_h[i] = dh[i] * z * (1.0 - c * c);
            dh_prev[i] = dh[i] * (1.0 - z);
        }
        drh.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(params.hidden_weights(Gate::Candidate), &da_h, &mut drh);
        for i in 0..d {
            let r = step.r[i];
            da_r[i] = drh[i] * step.h_prev[i] * r * (1.0 - r);
            dh_prev[i] += drh[i] * r;
        }
        matvec_t_add(params.hidden_weights(Gate::Update), &da_z, &mut dh_prev);
        matvec_t_add(params.hidden_weights(Gate::Reset), &da_r, &mut dh_prev);

        let x = params.embedding(step.item);
        rh.iter_mut().zip(step.r.iter().zip(&step.h_prev)).for_each(|(o, (a, b))| *o = a * b);
        for (gate, da, hidden_in) in [
            (Gate::Update, &da_z, &step.h_prev),
            (Gate::Reset, &da_r, &step.h_prev),
            (Gate::Candidate, &da_h, &rh),
        ] {
            let o = params.w_offset(gate);
            outer_add(&mut grad[o..o + d * d], da, x);
            let o = params.u_offset(gate);
            outer_add(&mut grad[o..o + d * d], da, hidden_in);
            let o = params.b_offset(gate);
            grad[o..o + d].iter_mut().zip(da.iter()).for_each(|(g, v)| *g += v);
        }
        let row = step.item.index() * d;
        let dx = &mut grad[row..row + d];
        matvec_t_add(params.input_weights(Gate::Update), &da_z, dx);
        matvec_t_add(params.input_weights(Gate::Reset), &da_r, dx);
        matvec_t_add(params.input_weights(Gate::Candidate), &da_h, dx);

        std::mem::swap(&mut dh, &mut dh_prev);
    }
}

fn logits_for(params: &Params, h: &[f64]) -> Vec<f64> {
    params
        .item_embeddings()
        .chunks_exact(params.dim)
        .map(|row| dot(row, h))
        .collect()
}

/// Accumulates the output-layer gradient for `dlogits` and returns `dL/dh`.
fn output_backward(params: &Params, h: &[f64], dlogits: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let d = params.dim;
    let mut dh = vec![0.0; d];
    let rows = params.item_embeddings().chunks_exact(d);
    let grows = grad[d..params.emb_len()].chunks_exact_mut(d);
    for ((row, grow), &g) in rows.zip(grows).zip(dlogits) {
        if g != 0.0 {
            for i in 0..d {
                dh[i] += g * row[i];
                grow[i] += g * h[i];
            }
        }
    }
    dh
}

fn truncate<'a>(prefix: &'a [ItemId], hp: &HyperParams) -> &'a [ItemId] {
    &prefix[prefix.len().saturating_sub(hp.max_prefix_len)..]
}

/// Encodes a prefix (left-truncated to the last `L` items) and scores all items.
pub fn forward(params: &Params, prefix: &[ItemId], hp: &HyperParams) -> (SessionState, ScoreVector) {
    let trace = run_window(params, truncate(prefix, hp));
    let h = trace.final_state(params.dim);
    let logits = logits_for(params, &h);
    let log_probs = log_softmax(&logits);
    (SessionState { h }, ScoreVector { logits, log_probs })
}

/// Scores only (skips the softmax normalisation).
pub fn score_logits(params: &Params, prefix: &[ItemId], hp: &HyperParams) -> Vec<f64> {
    let trace = run_window(params, truncate(prefix, hp));
    logits_for(params, &trace.final_state(params.dim))
}

/// Mean next-item cross-entropy over positions `1..n-1` of a session.
pub fn loss_rec(params: &Params, session: &Session, hp: &HyperParams) -> f64 {
    let n = session.len();
    assert!(n >= 2, "loss_rec needs a session of length >= 2");
    let items = &session.items;
    (1..n)
        .map(|t| {
            let (_, scores) = forward(params, &items[..t], hp);
            -scores.log_prob(items[t])
        })
        .sum::<f64>()
        / (n - 1) as f64
}

/// `+log P(target | prefix)`; minimising it is gradient ascent on the
/// target's likelihood.
pub fn loss_unlearn(params: &Params, sample: &UnlearnSample, hp: &HyperParams) -> f64 {
    forward(params, &sample.prefix, hp).1.log_prob(sample.target)
}

/// `-log P(successor | prefix)`, skipping the forgotten target.
pub fn loss_normal(params: &Params, sample: &UnlearnSample, hp: &HyperParams) -> f64 {
    -forward(params, &sample.prefix, hp).1.log_prob(sample.successor)
}

/// `KL(P_ref(·|prefix) ‖ P_θ(·|prefix))`.
pub fn loss_kl(params: &Params, reference: &Params, sample: &UnlearnSample, hp: &HyperParams) -> f64 {
    let (_, ours) = forward(params, &sample.prefix, hp);
    let (_, theirs) = forward(reference, &sample.prefix, hp);
    kl_divergence(&theirs.log_probs, &ours.log_probs)
}

/// `Σ p (log p − log q)` from log-probabilities.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Unlearn,
    Normal,
    Kl,
    Rec,
}

/// A batch for [`grad`]: sessions for `Rec`, unlearn samples otherwise.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Sessions(&'a [Session]),
    Samples(&'a [UnlearnSample]),
}

/// Per-prefix task gradients sharing one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixGrads {
    pub loss: f64,
    pub grad: GradientVector,
}

/// `dL/dlogits` for each prefix loss given the current log-probabilities.
fn prefix_dlogits(kind: LossKind, sample_target: ItemId, log_probs: &[f64], ref_log_probs: Option<&[f64]>) -> (f64, Vec<f64>) {
    let probs: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
    let idx = sample_target.index() - 1;
    match kind {
        LossKind::Unlearn => {
            let mut d: Vec<f64> = probs.iter().map(|p| -p).collect();
            d[idx] += 1.0;
            (log_probs[idx], d)
        }
        LossKind::Normal | LossKind::Rec => {
            let mut d = probs;
            d[idx] -= 1.0;
            (-log_probs[idx], d)
        }
        LossKind::Kl => {
            let r = ref_log_probs.expect("reference distribution");
            let loss = kl_divergence(r, log_probs);
            let d = probs.iter().zip(r).map(|(p, lr)| p - lr.exp()).collect();
            (loss, d)
        }
    }
}

/// Loss value and gradient of one prefix-conditioned loss on one sample.
fn prefix_loss_grad(
    params: &Params,
    prefix: &[ItemId],
    label: ItemId,
    kinds: &[LossKind],
    ref_log_probs: Option<&[f64]>,
    hp: &HyperParams,
) -> Vec<(f64, GradientVector)> {
    let trace = run_window(params, truncate(prefix, hp));
    let h = trace.final_state(params.dim);
    let log_probs = log_softmax(&logits_for(params, &h));
    kinds
        .iter()
        .map(|&kind| {
            let mut grad = vec![0.0; params.data.len()];
            let (loss, dlogits) = prefix_dlogits(kind, label, &log_probs, ref_log_probs);
            let dh = output_backward(params, &h, &dlogits, &mut grad);
            if !trace.steps.is_empty() {
                let mut dh_at: Vec<Option<Vec<f64>>> = vec![None; trace.steps.len()];
                *dh_at.last_mut().unwrap() = Some(dh);
                backward_window(params, &trace, &dh_at, &mut grad);
            }
            grad[..params.dim].iter_mut().for_each(|g| *g = 0.0);
            (loss, grad)
        })
        .collect()
}

/// Adds the gradients of the three unlearning-phase losses for one sample,
/// scaled by `scale`, into `acc` (order unlearn, normal, kl) from a single
/// forward pass. Returns the unscaled losses. When `skip_unlearn` accepts the
/// unlearn loss, that sample adds nothing to the unlearn gradient.
fn accumulate_task_grads(
    params: &Params,
    sample: &UnlearnSample,
    ref_log_probs: &[f64],
    hp: &HyperParams,
    scale: f64,
    skip_unlearn: impl Fn(f64) -> bool,
    acc: &mut [&mut [f64]; 3],
) -> [f64; 3] {
    let prefix = truncate(&sample.prefix, hp);
    let trace = run_window(params, prefix);
    let h = trace.final_state(params.dim);
    let log_probs = log_softmax(&logits_for(params, &h));
    let mut losses = [0.0; 3];
    for (i, kind) in [LossKind::Unlearn, LossKind::Normal, LossKind::Kl].into_iter().enumerate() {
        let label = if kind == LossKind::Unlearn { sample.target } else { sample.successor };
        let (loss, mut dlogits) = prefix_dlogits(kind, label, &log_probs, Some(ref_log_probs));
        losses[i] = loss;
        if i == 0 && skip_unlearn(loss) {
            continue;
        }
        dlogits.iter_mut().for_each(|v| *v *= scale);
        let grad = &mut *acc[i];
        let dh = output_backward(params, &h, &dlogits, grad);
        if !trace.steps.is_empty() {
            let mut dh_at: Vec<Option<Vec<f64>>> = vec![None; trace.steps.len()];
            *dh_at.last_mut().unwrap() = Some(dh);
            backward_window(params, &trace, &dh_at, grad);
        }
    }
    losses
}

/// Writes `∇L_unlearn` into `unlearn` and `∇(L_normal + L_kl)` into `retain`
/// for one sample; both buffers are overwritten.
pub fn unlearn_retain_grads(
    params: &Params,
    sample: &UnlearnSample,
    ref_log_probs: &[f64],
    hp: &HyperParams,
    unlearn: &mut [f64],
    retain: &mut [f64],
) {
    let trace = run_window(params, truncate(&sample.prefix, hp));
    let h = trace.final_state(params.dim);
    let log_probs = log_softmax(&logits_for(params, &h));
    let (_, du) = prefix_dlogits(LossKind::Unlearn, sample.target, &log_probs, None);
    let (_, dn) = prefix_dlogits(LossKind::Normal, sample.successor, &log_probs, None);
    let (_, dk) = prefix_dlogits(LossKind::Kl, sample.successor, &log_probs, Some(ref_log_probs));
    let dr: Vec<f64> = dn.iter().zip(&dk).map(|(a, b)| a + b).collect();
    for (grad, dlogits) in [(unlearn, du), (retain, dr)] {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let dh = output_backward(params, &h, &dlogits, grad);
        if !trace.steps.is_empty() {
            let mut dh_at: Vec<Option<Vec<f64>>> = vec![None; trace.steps.len()];
            *dh_at.last_mut().unwrap() = Some(dh);
            backward_window(params, &trace, &dh_at, grad);
        }
        grad[..params.dim].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Gradients of the three unlearning-phase losses for one sample, from a
/// single forward pass. Returned in the order unlearn, normal, kl.
pub fn sample_task_grads(
    params: &Params,
    reference: &Params,
    sample: &UnlearnSample,
    hp: &HyperParams,
) -> [PrefixGrads; 3] {
    let (_, ref_scores) = forward(reference, &sample.prefix, hp);
    let len = params.data.len();
    let mut bufs = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    let losses = {
        let [a, b, c] = &mut bufs;
        let mut acc = [a.as_mut_slice(), b.as_mut_slice(), c.as_mut_slice()];
        accumulate_task_grads(params, sample, &ref_scores.log_probs, hp, 1.0, |_| false, &mut acc)
    };
    let mut i = 0;
    bufs.map(|mut grad| {
        grad[..params.dim].iter_mut().for_each(|v| *v = 0.0);
        let loss = losses[i];
        i += 1;
        PrefixGrads { loss, grad }
    })
}

/// Loss and gradient of `loss_rec` on one session. Positions whose prefix fits
/// in `L` items share a single recurrence; longer ones get their own window.
fn session_rec_grad(params: &Params, session: &Session, hp: &HyperParams, grad: &mut [f64]) -> f64 {
    let items = &session.items;
    let n = items.len();
    let positions = n - 1;
    let scale = 1.0 / positions as f64;
    let shared = positions.min(hp.max_prefix_len);
    let mut total = 0.0;

    let trace = run_window(params, &items[..shared]);
    let mut dh_at: Vec<Option<Vec<f64>>> = Vec::with_capacity(shared);
    for (k, h) in trace.states.iter().enumerate() {
        let log_probs = log_softmax(&logits_for(params, h));
        let (loss, mut dlogits) = prefix_dlogits(LossKind::Rec, items[k + 1], &log_probs, None);
        total += loss;
        dlogits.iter_mut().for_each(|v| *v *= scale);
        dh_at.push(Some(output_backward(params, h, &dlogits, grad)));
    }
    backward_window(params, &trace, &dh_at, grad);

    for t in shared + 1..=positions {
        let window = &items[t - hp.max_prefix_len..t];
        let trace = run_window(params, window);
        let h = trace.final_state(params.dim);
        let log_probs = log_softmax(&logits_for(params, &h));
        let (loss, mut dlogits) = prefix_dlogits(LossKind::Rec, items[t], &log_probs, None);
        total += loss;
        dlogits.iter_mut().for_each(|v| *v *= scale);
        let mut dh_at: Vec<Option<Vec<f64>>> = vec![None; trace.steps.len()];
        *dh_at.last_mut().unwrap() = Some(output_backward(params, &h, &dlogits, grad));
        backward_window(params, &trace, &dh_at, grad);
    }
    total * scale
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Fixed-chunk parallel sum of per-item `(loss, grad)` contributions. The
/// reduction order depends only on the input length.
fn reduce_chunks<T: Sync>(
    items: &[T],
    len: usize,
    f: impl Fn(&T, &mut [f64]) -> f64 + Sync,
) -> (f64, GradientVector) {
    let partials: Vec<(f64, Vec<f64>)> = items
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; len];
            let loss = chunk.iter().map(|item| f(item, &mut g)).sum::<f64>();
            (loss, g)
        })
        .collect();
    let mut grad = vec![0.0; len];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        add_into(&mut grad, &g);
    }
    (loss, grad)
}

/// Batch-mean loss and its exact gradient. The padding row always receives a
/// zero gradient.
pub fn loss_and_grad(
    params: &Params,
    kind: LossKind,
    batch: Batch<'_>,
    hp: &HyperParams,
    reference: Option<&Params>,
) -> Result<(f64, GradientVector), ModelError> {
    let len = params.data.len();
    let (loss, mut grad, count) = match (kind, batch) {
        (LossKind::Rec, Batch::Sessions(sessions)) => {
            if sessions.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            let (l, g) = reduce_chunks(sessions, len, |s, g| session_rec_grad(params, s, hp, g));
            (l, g, sessions.len())
        }
        (LossKind::Rec, Batch::Samples(_)) | (_, Batch::Sessions(_)) => {
            return Err(ModelError::Shape(format!("{kind:?} loss does not accept this batch kind")))
        }
        (_, Batch::Samples(samples)) => {
            if samples.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            if kind == LossKind::Kl && reference.is_none() {
                return Err(ModelError::MissingReference);
            }
            let (l, g) = reduce_chunks(samples, len, |s, g| {
                let ref_lp = reference.map(|r| forward(r, &s.prefix, hp).1.log_probs);
                let label = if kind == LossKind::Unlearn { s.target } else { s.successor };
                let mut out = prefix_loss_grad(params, &s.prefix, label, &[kind], ref_lp.as_deref(), hp);
                let (loss, sg) = out.pop().unwrap();
                add_into(g, &sg);
                loss
            });
            (l, g, samples.len())
        }
    };
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    grad[..params.dim].iter_mut().for_each(|v| *v = 0.0);
    Ok((loss * inv, grad))
}

/// Gradient of the batch-mean loss.
pub fn grad(
    params: &Params,
    kind: LossKind,
    batch: Batch<'_>,
    hp: &HyperParams,
    reference: Option<&Params>,
) -> Result<GradientVector, ModelError> {
    loss_and_grad(params, kind, batch, hp, reference).map(|(_, g)| g)
}

/// Batch means of all three unlearning-phase losses and their gradients.
///
/// With `unlearn_floor = Some(f)`, samples whose `log P(target | prefix)` is
/// already below `f` add nothing to the unlearn gradient (their loss still
/// counts towards the mean).
pub fn batch_task_grads(
    params: &Params,
    reference: &Params,
    samples: &[UnlearnSample],
    hp: &HyperParams,
    unlearn_floor: Option<f64>,
) -> Result<[(f64, GradientVector); 3], ModelError> {
    let refs: Vec<Vec<f64>> = samples.par_iter().map(|s| forward(reference, &s.prefix, hp).1.log_probs).collect();
    let pairs: Vec<(&UnlearnSample, &[f64])> = samples.iter().zip(refs.iter().map(Vec::as_slice)).collect();
    batch_task_grads_with(params, &pairs, hp, unlearn_floor)
}

/// As [`batch_task_grads`], with the reference log-probabilities of each
/// sample supplied by the caller.
pub fn batch_task_grads_with(
    params: &Params,
    samples: &[(&UnlearnSample, &[f64])],
    hp: &HyperParams,
    unlearn_floor: Option<f64>,
) -> Result<[(f64, GradientVector); 3], ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let len = params.data.len();
    let inv = 1.0 / samples.len() as f64;
    let skip = |loss: f64| unlearn_floor.is_some_and(|f| loss < f);
    let partials: Vec<([f64; 3], [Vec<f64>; 3])> = samples
        .par_chunks(TASK_CHUNK)
        .map(|chunk| {
            let mut losses = [0.0; 3];
            let mut bufs = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
            {
                let [a, b, c] = &mut bufs;
                let mut acc = [a.as_mut_slice(), b.as_mut_slice(), c.as_mut_slice()];
                for &(s, r) in chunk {
                    let l = accumulate_task_grads(params, s, r, hp, inv, skip, &mut acc);
                    losses.iter_mut().zip(l).for_each(|(a, v)| *a += v);
                }
            }
            (losses, bufs)
        })
        .collect();
    let mut out = [(0.0, vec![0.0; len]), (0.0, vec![0.0; len]), (0.0, vec![0.0; len])];
    for (losses, bufs) in partials {
        for ((o, l), g) in out.iter_mut().zip(losses).zip(bufs.iter()) {
            o.0 += l;
            add_into(&mut o.1, g);
        }
    }
    for o in &mut out {
        o.0 *= inv;
        o.1[..params.dim].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with step size `lr`. The padding row is
/// never touched.
pub fn adam_step(params: &mut Params, adam: &mut AdamState, g: &[f64], hp: &HyperParams, lr: f64) {
    assert_eq!(g.len(), params.data.len(), "gradient length mismatch");
    assert_eq!(adam.m.len(), params.data.len(), "adam state length mismatch");
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let d = params.dim;
    for i in d..params.data.len() {
        let gi = g[i];
        let m = hp.beta1 * adam.m[i] + (1.0 - hp.beta1) * gi;
        let v = hp.beta2 * adam.v[i] + (1.0 - hp.beta2) * gi * gi;
        adam.m[i] = m;
        adam.v[i] = v;
        params.data[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
    }
}

/// 1-based rank of `target` among all real items; ties go to the lower id.
pub fn rank_of(logits: &[f64], target: ItemId) -> usize {
    let ti = target.index() - 1;
    let ts = logits[ti];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > ts || (s == ts && i < ti))
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_recall: f64,
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam on `loss_rec`, keeping the parameters with the best
/// validation Recall@10 (epoch 0 = the initial parameters).
pub fn train(
    init: &Params,
    train: &Corpus,
    valid: &Corpus,
    hp: &HyperParams,
    epochs: usize,
) -> Result<(Params, TrainReport), ModelError> {
    hp.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let sessions: Vec<&Session> = train.sessions.iter().filter(|s| s.len() >= 2).collect();
    if sessions.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut params = init.clone();
    let mut best = init.clone();
    let mut best_recall = if epochs == 0 {
        0.0
    } else {
        crate::eval::recall_at_k(&params, valid, hp, 10)
    };
    let mut best_epoch = 0;
    let mut adam = AdamState::new(params.data.len());
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.train_batch) {
            let batch: Vec<Session> = chunk.iter().map(|&i| sessions[i].clone()).collect();
            let (loss, g) = loss_and_grad(&params, LossKind::Rec, Batch::Sessions(&batch), hp, None)?;
            adam_step(&mut params, &mut adam, &g, hp, hp.learn_rate);
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
        let recall = crate::eval::recall_at_k(&params, valid, hp, 10);
        log::debug!("epoch {epoch}: loss {:.4} valid R@10 {:.4}", loss_sum / batches as f64, recall);
        if recall > best_recall {
            best_recall = recall;
            best_epoch = epoch;
            best = params.clone();
        }
    }
    Ok((
        best,
        TrainReport {
            epochs_run: epochs,
            best_epoch,
            best_valid_recall: best_recall,
            epoch_losses,
        },
    ))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CAU1";

/// Little-endian checkpoint: magic, `|V|`, `d`, `L` as u32, then the flat
/// parameter vector as f64.
pub fn checkpoint_bytes(params: &Params, hp: &HyperParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.item_count as u32).to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    out.extend_from_slice(&(hp.max_prefix_len as u32).to_le_bytes());
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub item_count: usize,
    pub dim: usize,
    pub max_prefix_len: usize,
}

pub fn params_from_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Params), ModelError> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("missing CAU1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let header = CheckpointHeader {
        item_count: word(4),
        dim: word(8),
        max_prefix_len: word(12),
    };
    let body = &bytes[16..];
    let want = Params::flat_len(header.item_count, header.dim);
    if body.len() != want * 8 {
        return Err(ModelError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            want * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = Params::from_flat(header.item_count, header.dim, data)?;
    Ok((header, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub hyper_params: HyperParams,
    pub seed: u64,
}

/// Writes `path` plus a `<path>.json` sidecar with the hyperparameters.
pub fn save_checkpoint(path: &Path, params: &Params, hp: &HyperParams) -> Result<(), ModelError> {
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&checkpoint_bytes(params, hp)).map_err(io)?;
    let sidecar = CheckpointSidecar {
        hyper_params: hp.clone(),
        seed: hp.seed,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    fs::write(sidecar_path(path), json + "\n").map_err(io)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, HyperParams), ModelError> {
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = fs::read(path).map_err(io)?;
    let (header, params) = params_from_checkpoint(&bytes)?;
    let side = fs::read_to_string(sidecar_path(path)).map_err(io)?;
    let sidecar: CheckpointSidecar =
        serde_json::from_str(&side).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if sidecar.hyper_params.embed_dim != header.dim || sidecar.hyper_params.max_prefix_len != header.max_prefix_len {
        return Err(ModelError::Checkpoint("sidecar disagrees with binary header".into()));
    }
    Ok((params, sidecar.hyper_params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_hp() -> HyperParams {
        HyperParams {
            embed_dim: 8,
            max_prefix_len: 5,
            seed: 11,
            ..HyperParams::default()
        }
    }

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn init_is_seeded_and_pads_zero() {
        let hp = tiny_hp();
        let a = init_params(&hp, 20);
        assert_eq!(a, init_params(&hp, 20));
        assert!(a.padding_row_is_zero());
        assert_eq!(a.as_flat().len(), 576);
        let s = hp.init_scale();
        assert!(a.as_flat()[8..].iter().all(|v| v.abs() < s));
        let other = init_params(&HyperParams { seed: 12, ..hp }, 20);
        assert_ne!(a, other);
    }

    #[test]
    fn empty_prefix_is_uniform() {
        let hp = tiny_hp();
        let p = init_params(&hp, 20);
        let (state, scores) = forward(&p, &[], &hp);
        assert!(state.h.iter().all(|&v| v == 0.0));
        for lp in &scores.log_probs {
            assert!((lp + (20f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_truncates_to_last_l() {
        let hp = tiny_hp();
        let p = init_params(&hp, 20);
        let long = ids(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let a = forward(&p, &long, &hp);
        let b = forward(&p, &long[3..], &hp);
        assert_eq!(a, b);
        assert_eq!(a, forward(&p, &long, &hp));
    }

    #[test]
    fn probabilities_normalised() {
        let hp = tiny_hp();
        let p = init_params(&HyperParams { init_scale: Some(3.0), ..hp.clone() }, 20);
        let (_, s) = forward(&p, &ids(&[4, 9, 1]), &hp);
        let total: f64 = s.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unlearn_is_negated_normal_form() {
        let hp = tiny_hp();
        let p = init_params(&hp, 20);
        let s = UnlearnSample {
            session_id: 0,
            position: 3,
            prefix: ids(&[3, 7]),
            target: ItemId(5),
            successor: ItemId(5),
        };
        let a = loss_unlearn(&p, &s, &hp);
        let b = loss_normal(&p, &s, &hp);
        assert!((a + b).abs() < 1e-14);
        let gu = grad(&p, LossKind::Unlearn, Batch::Samples(std::slice::from_ref(&s)), &hp, None).unwrap();
        let gn = grad(&p, LossKind::Normal, Batch::Samples(std::slice::from_ref(&s)), &hp, None).unwrap();
        for (x, y) in gu.iter().zip(&gn) {
            assert!((x + y).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_zero_at_reference() {
        let hp = tiny_hp();
        let p = init_params(&hp, 20);
        let s = UnlearnSample {
            session_id: 0,
            position: 3,
            prefix: ids(&[3, 7]),
            target: ItemId(5),
            successor: ItemId(6),
        };
        assert_eq!(loss_kl(&p, &p, &s, &hp), 0.0);
        let g = grad(&p, LossKind::Kl, Batch::Samples(std::slice::from_ref(&s)), &hp, Some(&p)).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
        assert!(matches!(
            grad(&p, LossKind::Kl, Batch::Samples(std::slice::from_ref(&s)), &hp, None),
            Err(ModelError::MissingReference)
        ));
    }

    #[test]
    fn kl_closed_form() {
        let lp = [0.5f64.ln(), 0.5f64.ln()];
        let lq = [0.25f64.ln(), 0.75f64.ln()];
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&lp, &lq) - want).abs() < 1e-12);
        assert!((kl_divergence(&lp, &lq) - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn shared_forward_matches_single_losses() {
        let hp = tiny_hp();
        let p = init_params(&hp, 20);
        let r = init_params(&HyperParams { seed: 5, ..hp.clone() }, 20);
        let s = UnlearnSample {
            session_id: 0,
            position: 4,
            prefix: ids(&[3, 7, 2]),
            target: ItemId(5),
            successor: ItemId(6),
        };
        let all = sample_task_grads(&p, &r, &s, &hp);
        let one = std::slice::from_ref(&s);
        for (i, kind) in [LossKind::Unlearn, LossKind::Normal, LossKind::Kl].into_iter().enumerate() {
            let (l, g) = loss_and_grad(&p, kind, Batch::Samples(one), &hp, Some(&r)).unwrap();
            assert!((l - all[i].loss).abs() < 1e-14);
            for (a, b) in g.iter().zip(&all[i].grad) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let hp = tiny_hp();
        let mut p = init_params(&hp, 20);
        let before = p.clone();
        let mut st = AdamState::new(p.as_flat().len());
        adam_step(&mut p, &mut st, &vec![0.0; before.as_flat().len()], &hp, hp.learn_rate);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_opposes_gradient() {
        let hp = tiny_hp();
        let mut p = init_params(&hp, 20);
        let before = p.clone();
        let len = p.as_flat().len();
        let g: Vec<f64> = (0..len).map(|i| if i % 3 == 0 { 0.5 } else { -0.25 }).collect();
        let mut st = AdamState::new(len);
        adam_step(&mut p, &mut st, &g, &hp, hp.learn_rate);
        for i in 8..len {
            let delta = p.as_flat()[i] - before.as_flat()[i];
            assert!(delta * g[i] < 0.0);
            assert!((delta.abs() - hp.learn_rate).abs() < 1e-6);
        }
        assert!(p.padding_row_is_zero());
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        // f(x) = Σ c_i (x_i - 1)^2 on the non-padding coordinates
        let hp = HyperParams { learn_rate: 0.05, ..tiny_hp() };
        let mut p = Params::zeros(2, 2);
        let len = p.as_flat().len();
        let coef: Vec<f64> = (0..len).map(|i| 1.0 + (i % 4) as f64).collect();
        let f = |x: &[f64]| -> f64 { (2..len).map(|i| coef[i] * (x[i] - 1.0).powi(2)).sum() };
        let mut st = AdamState::new(len);
        let mut values = vec![f(p.as_flat())];
        for _ in 0..100 {
            let x = p.as_flat().to_vec();
            let g: Vec<f64> = (0..len).map(|i| if i < 2 { 0.0 } else { 2.0 * coef[i] * (x[i] - 1.0) }).collect();
            adam_step(&mut p, &mut st, &g, &hp, hp.learn_rate);
            values.push(f(p.as_flat()));
        }
        // monotone over the approach phase, then well below the start
        for w in values[..15].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(values[100] < 1e-2 * values[0]);
    }

    #[test]
    fn rank_ties_favor_lower_id() {
        let logits = [0.5, 1.0, 1.0, 0.2];
        assert_eq!(rank_of(&logits, ItemId(2)), 1);
        assert_eq!(rank_of(&logits, ItemId(3)), 2);
        assert_eq!(rank_of(&logits, ItemId(1)), 3);
        assert_eq!(rank_of(&logits, ItemId(4)), 4);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let hp = tiny_hp();
        let p = init_params(&hp, 20);
        let bytes = checkpoint_bytes(&p, &hp);
        assert_eq!(&bytes[..4], b"CAU1");
        let (header, back) = params_from_checkpoint(&bytes).unwrap();
        assert_eq!(header.item_count, 20);
        assert_eq!(header.dim, 8);
        assert_eq!(header.max_prefix_len, 5);
        assert_eq!(back, p);
        assert!(params_from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let hp = tiny_hp();
        let p = init_params(&hp, 4);
        let corpus = Corpus::new(vec![Session::new(0, ids(&[1, 2, 3]))], 4, "t");
        let (out, report) = train(&p, &corpus, &corpus, &hp, 0).unwrap();
        assert_eq!(out, p);
        assert_eq!(report.best_epoch, 0);
    }
}
