//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use cau::data::{Corpus, ItemId, Session, UnlearnSample};
use cau::model::{HyperParams, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_hp(dim: usize, seed: u64) -> HyperParams {
    HyperParams {
        embed_dim: dim,
        max_prefix_len: 10,
        seed,
        ..HyperParams::default()
    }
}

/// Random parameters with a zero padding row; `scale` sets the spread.
pub fn random_params(items: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Params {
    let len = Params::flat_len(items, dim);
    let mut data: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
    data[..dim].iter_mut().for_each(|v| *v = 0.0);
    Params::from_flat(items, dim, data).unwrap()
}

pub fn random_sessions(n: usize, items: usize, len: std::ops::RangeInclusive<usize>, rng: &mut ChaCha8Rng) -> Vec<Session> {
    (0..n)
        .map(|id| {
            let l = rng.random_range(len.clone());
            let s = (0..l).map(|_| ItemId(rng.random_range(1..=items as u32))).collect();
            Session::new(id as u64, s)
        })
        .collect()
}

/// One random eligible sample per session.
pub fn random_samples(sessions: &[Session], rng: &mut ChaCha8Rng) -> Vec<UnlearnSample> {
    sessions
        .iter()
        .filter(|s| s.len() >= 3)
        .map(|s| {
            let t = rng.random_range(2..s.len());
            UnlearnSample::from_session(s, t).unwrap()
        })
        .collect()
}

pub fn corpus(sessions: Vec<Session>, items: usize) -> Corpus {
    Corpus::new(sessions, items, "test")
}

/// Central differences of `f` at every coordinate.
pub fn fd_gradient(params: &Params, step: f64, f: impl Fn(&Params) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.as_flat().len())
        .map(|i| {
            let orig = p.as_flat()[i];
            p.as_flat_mut()[i] = orig + step;
            let up = f(&p);
            p.as_flat_mut()[i] = orig - step;
            let down = f(&p);
            p.as_flat_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest coordinate-wise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A small synthetic corpus, split, with a trained model and a forget set.
pub struct Toy {
    pub split: cau::data::SplitCorpus,
    pub forget: Vec<UnlearnSample>,
    pub rec: Params,
    pub hp: HyperParams,
}

pub fn toy_pipeline(n_sessions: usize, n_items: usize, epochs: usize, seed: u64) -> Toy {
    let spec = cau::synth::SynthSpec {
        n_sessions,
        n_items,
        sharpness: 50.0,
        seed,
        ..Default::default()
    };
    toy_from_spec(&spec, epochs)
}

pub fn toy_from_spec(spec: &cau::synth::SynthSpec, epochs: usize) -> Toy {
    let seed = spec.seed;
    let (raw, _) = cau::synth::generate(spec).unwrap();
    let corpus = cau::data::preprocess(&raw, 1).unwrap();
    let split = cau::data::split(&corpus, seed).unwrap();
    let forget = cau::data::select_unlearn(&split.train, 0.1, seed, 1).unwrap();
    let hp = HyperParams {
        embed_dim: 16,
        learn_rate: 1e-2,
        train_batch: 64,
        seed,
        ..HyperParams::default()
    };
    let init = cau::model::init_params(&hp, split.train.item_count);
    let (rec, _) = cau::model::train(&init, &split.train, &split.valid, &hp, epochs).unwrap();
    Toy { split, forget, rec, hp }
}

impl Toy {
    pub fn ctx(&self) -> cau::engine::UnlearnContext<'_> {
        cau::engine::UnlearnContext {
            rec: &self.rec,
            forget: &self.forget,
            train: &self.split.train,
            valid: &self.split.valid,
            hp: &self.hp,
            train_epochs: 10,
        }
    }
}
