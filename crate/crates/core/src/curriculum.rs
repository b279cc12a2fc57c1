//! Unlearning difficulty scores and easy-to-hard batch scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::UnlearnSample;
use crate::model::{forward, unlearn_retain_grads, HyperParams, Params};

/// Norm below which a gradient counts as zero for the cosine.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyKind {
    Gradient,
    Embedding,
}

impl DifficultyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyKind::Gradient => "gradient",
            DifficultyKind::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyScore {
    /// Index into the forget set.
    pub sample: usize,
    pub score: f64,
    pub kind: DifficultyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub metric: DifficultyKind,
    pub strategy: Strategy,
    pub temperature: f64,
    /// Soft sampling: recompute scores every `refresh_interval` steps.
    pub refresh_interval: usize,
    pub batch: usize,
    /// Soft sampling draws each sample at most once per epoch when false.
    pub with_replacement: bool,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            metric: DifficultyKind::Gradient,
            strategy: Strategy::Hard,
            temperature: 2.0,
            refresh_interval: 1,
            batch: 128,
            with_replacement: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CurriculumError {
    #[error("forget set is empty")]
    Empty,
    #[error("batch of {batch} exceeds the {available} available samples")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("invalid curriculum config: {0}")]
    Config(String),
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CurriculumError::Config("temperature must be > 0".into()));
        }
        if self.refresh_interval == 0 {
            return Err(CurriculumError::Config("refresh_interval must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(CurriculumError::Config("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training progress `t = step / total` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Progress(f64);

impl Progress {
    pub fn new(t: f64) -> Self {
        assert!((0.0..=1.0).contains(&t), "progress must lie in [0,1], got {t}");
        Progress(t)
    }

    pub fn from_steps(step: usize, total: usize) -> Self {
        Progress::new(if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) })
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Negative cosine between two vectors, or 0 when either is (near) zero.
pub fn neg_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = ([0.0; 4], [0.0; 4], [0.0; 4]);
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    for (k, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        ab[k] += x * y;
        aa[k] += x * x;
        bb[k] += y * y;
    }
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            ab[k] += x[k] * y[k];
            aa[k] += x[k] * x[k];
            bb[k] += y[k] * y[k];
        }
    }
    let sum = |v: [f64; 4]| (v[0] + v[1]) + (v[2] + v[3]);
    let (ab, aa, bb) = (sum(ab), sum(aa), sum(bb));
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (-ab / (na * nb)).clamp(-1.0, 1.0)
}

/// `−cos(∇L_unlearn, ∇L_normal + ∇L_kl)` on one sample.
pub fn dif_gradient(params: &Params, reference: &Params, sample: &UnlearnSample, hp: &HyperParams) -> f64 {
    let (_, ref_scores) = forward(reference, &sample.prefix, hp);
    let len = params.as_flat().len();
    let (mut u, mut r) = (vec![0.0; len], vec![0.0; len]);
    unlearn_retain_grads(params, sample, &ref_scores.log_probs, hp, &mut u, &mut r);
    neg_cosine(&u, &r)
}

/// `⟨e_session(prefix), E[target]⟩` (the target's logit).
pub fn dif_embedding(params: &Params, sample: &UnlearnSample, hp: &HyperParams) -> f64 {
    let (state, _) = forward(params, &sample.prefix, hp);
    state
        .h
        .iter()
        .zip(params.embedding(sample.target))
        .map(|(a, b)| a * b)
        .sum()
}

/// Scores every sample of the forget set with the current parameters.
pub fn score_all(
    params: &Params,
    reference: &Params,
    forget: &[UnlearnSample],
    kind: DifficultyKind,
    hp: &HyperParams,
) -> Vec<DifficultyScore> {
    let refs: Vec<Vec<f64>> = match kind {
        DifficultyKind::Gradient => forget.par_iter().map(|s| forward(reference, &s.prefix, hp).1.log_probs).collect(),
        DifficultyKind::Embedding => Vec::new(),
    };
    score_all_with(params, forget, &refs, kind, hp)
}

/// As [`score_all`], with the reference log-probabilities of each sample
/// precomputed (ignored by the embedding metric).
pub fn score_all_with(
    params: &Params,
    forget: &[UnlearnSample],
    ref_log_probs: &[Vec<f64>],
    kind: DifficultyKind,
    hp: &HyperParams,
) -> Vec<DifficultyScore> {
    let len = params.as_flat().len();
    forget
        .par_iter()
        .enumerate()
        .map_init(
            || (vec![0.0; len], vec![0.0; len]),
            |(u, r), (i, s)| DifficultyScore {
                sample: i,
                score: match kind {
                    DifficultyKind::Gradient => {
                        unlearn_retain_grads(params, s, &ref_log_probs[i], hp, u, r);
                        neg_cosine(u, r)
                    }
                    DifficultyKind::Embedding => dif_embedding(params, s, hp),
                },
                kind,
            },
        )
        .collect()
}

/// Ascending-difficulty order (stable; ties by sample index), chunked into
/// consecutive batches of sample indices.
pub fn hard_schedule(scores: &[DifficultyScore], batch: usize) -> Result<Vec<Vec<usize>>, CurriculumError> {
    if scores.is_empty() {
        return Err(CurriculumError::Empty);
    }
    if batch == 0 {
        return Err(CurriculumError::Config("batch must be >= 1".into()));
    }
    let mut order: Vec<&DifficultyScore> = scores.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.sample.cmp(&b.sample)));
    Ok(order
        .chunks(batch)
        .map(|c| c.iter().map(|s| s.sample).collect())
        .collect())
}

/// `log p_x ∝ τ (2t − 1)(Dif(x) − mean Dif)`, normalised in log space.
pub fn soft_log_probabilities(scores: &[f64], t: Progress, temperature: f64) -> Vec<f64> {
    assert!(!scores.is_empty(), "need at least one score");
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let slope = temperature * (2.0 * t.value() - 1.0);
    let logits: Vec<f64> = scores.iter().map(|s| slope * (s - mean)).collect();
    crate::model::log_softmax(&logits)
}

pub fn soft_probabilities(scores: &[f64], t: Progress, temperature: f64) -> Vec<f64> {
    soft_log_probabilities(scores, t, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// RNG for one soft-sampling draw, fixed by `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Weighted sampling without replacement by exponential keys: each candidate
/// gets `ln(u) / p` (the log of `u^(1/p)`) and the `batch` largest keys win.
/// `candidates` restricts the draw to a subset of indices; `log_probs` is
/// indexed by sample.
pub fn weighted_draw(
    log_probs: &[f64],
    candidates: &[usize],
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, CurriculumError> {
    if batch > candidates.len() {
        return Err(CurriculumError::BatchTooLarge {
            batch,
            available: candidates.len(),
        });
    }
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            // u in (0, 1]
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() * (-log_probs[i]).exp(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().take(batch).map(|(_, i)| i).collect())
}

/// One soft-sampled batch over the whole forget set, deterministic per
/// `(seed, step)`.
pub fn soft_draw_batch(
    scores: &[f64],
    t: Progress,
    temperature: f64,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<usize>, CurriculumError> {
    if scores.is_empty() {
        return Err(CurriculumError::Empty);
    }
    let log_probs = soft_log_probabilities(scores, t, temperature);
    let all: Vec<usize> = (0..scores.len()).collect();
    weighted_draw(&log_probs, &all, batch, &mut step_rng(seed, step))
}
