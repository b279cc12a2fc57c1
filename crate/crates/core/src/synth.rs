//! Seeded first-order Markov corpus generator.
//!
//! Item popularity follows a Zipf law. Every item owns a transition row drawn
//! from a Dirichlet whose concentration is the popularity vector scaled by
//! `n_items / sharpness`, so large sharpness yields near-deterministic bigrams.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, ItemId, Session};

pub const MIN_SESSIONS: usize = 100;
pub const MIN_ITEMS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_sessions: usize,
    pub n_items: usize,
    pub sharpness: f64,
    /// Zipf exponent of item popularity; 0 gives uniform popularity.
    pub zipf_exponent: f64,
    /// Session lengths are uniform over `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_sessions: 2000,
            n_items: 200,
            sharpness: 20.0,
            zipf_exponent: 0.8,
            min_len: 5,
            max_len: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("n_sessions must be at least {MIN_SESSIONS}, got {0}")]
    TooFewSessions(usize),
    #[error("n_items must be at least {MIN_ITEMS}, got {0}")]
    TooFewItems(usize),
    #[error("invalid synth spec: {0}")]
    Invalid(String),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_sessions < MIN_SESSIONS {
            return Err(SynthError::TooFewSessions(self.n_sessions));
        }
        if self.n_items < MIN_ITEMS {
            return Err(SynthError::TooFewItems(self.n_items));
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(SynthError::Invalid(format!("sharpness must be positive, got {}", self.sharpness)));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(SynthError::Invalid(format!(
                "zipf_exponent must be non-negative, got {}",
                self.zipf_exponent
            )));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(SynthError::Invalid(format!(
                "session lengths need 2 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Start distribution and row-stochastic transition matrix over items `1..=n`.
/// Index `i` of each vector refers to item `i + 1`.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub popularity: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

fn zipf(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// One Dirichlet row. Tiny concentrations can underflow every Gamma draw to
/// zero; the row then collapses onto a popularity-weighted single successor.
fn dirichlet_row(alpha: &[f64], fallback: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = row.iter().sum();
    if total > 0.0 && total.is_finite() {
        row.iter_mut().for_each(|p| *p /= total);
    } else {
        row.iter_mut().for_each(|p| *p = 0.0);
        row[fallback.sample(rng)] = 1.0;
    }
    row
}

pub fn build_chain(spec: &SynthSpec) -> Result<MarkovChain, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let popularity = zipf(spec.n_items, spec.zipf_exponent);
    let scale = spec.n_items as f64 / spec.sharpness;
    let alpha: Vec<f64> = popularity.iter().map(|p| (p * scale).max(1e-300)).collect();
    let fallback = WeightedIndex::new(&popularity).expect("zipf weights are positive");
    let transitions = (0..spec.n_items)
        .map(|_| dirichlet_row(&alpha, &fallback, &mut rng))
        .collect();
    Ok(MarkovChain { popularity, transitions })
}

/// Samples the corpus. Session ids are `0..n_sessions`.
pub fn generate(spec: &SynthSpec) -> Result<(Corpus, MarkovChain), SynthError> {
    let chain = build_chain(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let start = WeightedIndex::new(&chain.popularity).expect("zipf weights are positive");
    let rows: Vec<WeightedIndex<f64>> = chain
        .transitions
        .iter()
        .map(|r| WeightedIndex::new(r).expect("normalized row"))
        .collect();
    let mut sessions = Vec::with_capacity(spec.n_sessions);
    for id in 0..spec.n_sessions {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = start.sample(&mut rng);
        let mut items = Vec::with_capacity(len);
        items.push(ItemId(cur as u32 + 1));
        for _ in 1..len {
            cur = rows[cur].sample(&mut rng);
            items.push(ItemId(cur as u32 + 1));
        }
        sessions.push(Session::new(id as u64, items));
    }
    let source = format!(
        "synth:n={},items={},sharpness={},zipf={},len={}..={},seed={}",
        spec.n_sessions, spec.n_items, spec.sharpness, spec.zipf_exponent, spec.min_len, spec.max_len, spec.seed
    );
    Ok((Corpus::new(sessions, spec.n_items, source), chain))
}

/// Mean over items with at least `min_support` observed successors of the
/// empirical share taken by their most frequent successor.
pub fn top_transition_share(corpus: &Corpus, min_support: usize) -> Option<f64> {
    let n = corpus.item_count;
    let mut counts = vec![vec![0usize; n + 1]; n + 1];
    for s in &corpus.sessions {
        for w in s.items.windows(2) {
            counts[w[0].index()][w[1].index()] += 1;
        }
    }
    let shares: Vec<f64> = counts
        .iter()
        .filter_map(|row| {
            let total: usize = row.iter().sum();
            (total >= min_support.max(1)).then(|| *row.iter().max().unwrap() as f64 / total as f64)
        })
        .collect();
    if shares.is_empty() {
        None
    } else {
        Some(shares.iter().sum::<f64>() / shares.len() as f64)
    }
}
