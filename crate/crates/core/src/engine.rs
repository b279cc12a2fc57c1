//! Unlearning runs: the curriculum + Pareto procedure, its ablations, and the
//! retrain / original baselines.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{
    hard_schedule, score_all_with, soft_log_probabilities, step_rng, weighted_draw, CurriculumConfig,
    CurriculumError, DifficultyKind, Progress, Strategy,
};
use crate::data::{splice_out, Corpus, UnlearnSample};
use crate::model::{self, adam_step, batch_task_grads, batch_task_grads_with, init_params, AdamState, HyperParams, ModelError, Params};
use crate::pareto::{self, combine, gram, solve_min_norm, ParetoError, SimplexWeights, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Curriculum schedule + Pareto weights.
    Cau,
    /// Fixed α = (1/3, 1/3, 1/3).
    EqualWeights,
    /// Pareto weights, batches reshuffled every epoch.
    RandomOrder,
    /// Gradient ascent on the unlearn loss alone.
    GaOnly,
    /// Train from scratch on the corpus with the forget set spliced out.
    Retrain,
    /// The trained model, untouched.
    Original,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Cau,
        Mode::EqualWeights,
        Mode::RandomOrder,
        Mode::GaOnly,
        Mode::Retrain,
        Mode::Original,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cau => "cau",
            Mode::EqualWeights => "equal_weights",
            Mode::RandomOrder => "random_order",
            Mode::GaOnly => "ga_only",
            Mode::Retrain => "retrain",
            Mode::Original => "original",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnRunConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub curriculum: CurriculumConfig,
    pub pareto_tol: f64,
    pub pareto_max_iter: usize,
    /// Rescale task gradients to unit norm before the min-norm solve.
    /// Ignored by the equal-weights mode.
    pub normalize_gradients: bool,
    pub auxiliary_retain: bool,
    pub auxiliary_retain_size: usize,
    /// Stop the unlearn gradient of samples with `P(target) < p_min`.
    pub unlearn_floor: bool,
    /// `None` means `1 / (10 |V|)`.
    pub unlearn_floor_p_min: Option<f64>,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub seed: u64,
}

impl Default for UnlearnRunConfig {
    fn default() -> Self {
        UnlearnRunConfig {
            mode: Mode::Cau,
            epochs: 100,
            curriculum: CurriculumConfig::default(),
            pareto_tol: 1e-6,
            pareto_max_iter: 100,
            normalize_gradients: false,
            auxiliary_retain: false,
            auxiliary_retain_size: 0,
            unlearn_floor: false,
            unlearn_floor_p_min: None,
            divergence_factor: 5.0,
            divergence_patience: 3,
            seed: 0,
        }
    }
}

impl UnlearnRunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.curriculum.validate()?;
        if !(self.pareto_tol.is_finite() && self.pareto_tol > 0.0) || self.pareto_max_iter == 0 {
            return Err(EngineError::Config("pareto_tol must be > 0 and pareto_max_iter >= 1".into()));
        }
        if !(self.divergence_factor > 1.0) || self.divergence_patience == 0 {
            return Err(EngineError::Config("divergence guard needs factor > 1 and patience >= 1".into()));
        }
        if let Some(p) = self.unlearn_floor_p_min {
            if !(p > 0.0 && p < 1.0) {
                return Err(EngineError::Config("unlearn_floor_p_min must lie in (0,1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("mode {0:?} is not valid here")]
    WrongMode(Mode),
    #[error(
        "divergence guard: normal loss {value:.4} exceeded {factor}x its initial {initial:.4} for {patience} epochs (epoch {epoch})"
    )]
    Divergence {
        epoch: usize,
        value: f64,
        initial: f64,
        factor: f64,
        patience: usize,
    },
}

/// Everything a run reads.
#[derive(Debug, Clone, Copy)]
pub struct UnlearnContext<'a> {
    /// Trained parameters θ_rec.
    pub rec: &'a Params,
    pub forget: &'a [UnlearnSample],
    pub train: &'a Corpus,
    pub valid: &'a Corpus,
    pub hp: &'a HyperParams,
    /// Epoch budget for retraining.
    pub train_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub epoch: usize,
    pub step: usize,
    pub alpha: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub unlearn: f64,
    pub normal: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub sample: usize,
    pub kind: DifficultyKind,
    pub score: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub scoring_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub mode: Mode,
    /// θ_app (θ_exa for retrain, θ_rec for original).
    pub params: Params,
    pub alpha_trace: Vec<AlphaRecord>,
    pub loss_trace: Vec<LossRecord>,
    pub difficulty: Vec<DifficultyRecord>,
    pub steps: usize,
    pub timings: Timings,
}

impl RunArtifacts {
    fn bare(mode: Mode, params: Params, secs: f64) -> Self {
        RunArtifacts {
            mode,
            params,
            alpha_trace: Vec::new(),
            loss_trace: Vec::new(),
            difficulty: Vec::new(),
            steps: 0,
            timings: Timings {
                total_secs: secs,
                scoring_secs: 0.0,
            },
        }
    }

    /// `epoch,step,alpha1,alpha2,alpha3` with header.
    pub fn alpha_csv(&self) -> String {
        let mut out = String::from("epoch,step,alpha1,alpha2,alpha3\n");
        for r in &self.alpha_trace {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.alpha[0], r.alpha[1], r.alpha[2]));
        }
        out
    }

    /// `sample_id,kind,score,epoch` with header.
    pub fn difficulty_csv(&self, forget: &[UnlearnSample]) -> String {
        let mut out = String::from("sample_id,kind,score,epoch\n");
        for r in &self.difficulty {
            let s = &forget[r.sample];
            out.push_str(&format!(
                "{}:{},{},{},{}\n",
                s.session_id,
                s.position,
                r.kind.as_str(),
                r.score,
                r.epoch
            ));
        }
        out
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,unlearn,normal,kl\n");
        for r in &self.loss_trace {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.unlearn, r.normal, r.kl));
        }
        out
    }
}

/// Called after every completed epoch with the current parameters.
pub type EpochObserver<'o> = dyn FnMut(usize, &Params) + 'o;

/// Dispatches on `config.mode`.
pub fn run(ctx: UnlearnContext<'_>, config: &UnlearnRunConfig) -> Result<RunArtifacts, EngineError> {
    run_observed(ctx, config, &mut |_, _| {})
}

pub fn run_observed(
    ctx: UnlearnContext<'_>,
    config: &UnlearnRunConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<RunArtifacts, EngineError> {
    match config.mode {
        Mode::Original => Ok(RunArtifacts::bare(Mode::Original, ctx.rec.clone(), 0.0)),
        Mode::Retrain => retrain(ctx),
        Mode::Cau | Mode::EqualWeights | Mode::RandomOrder | Mode::GaOnly => unlearn_loop(ctx, config, observer),
    }
}

/// Curriculum-scheduled, Pareto-weighted unlearning from θ_rec.
pub fn unlearn_cau(ctx: UnlearnContext<'_>, config: &UnlearnRunConfig) -> Result<RunArtifacts, EngineError> {
    if config.mode != Mode::Cau {
        return Err(EngineError::WrongMode(config.mode));
    }
    unlearn_loop(ctx, config, &mut |_, _| {})
}

/// One of the ablations: equal weights, random order, or GA only.
pub fn unlearn_variant(ctx: UnlearnContext<'_>, config: &UnlearnRunConfig) -> Result<RunArtifacts, EngineError> {
    match config.mode {
        Mode::EqualWeights | Mode::RandomOrder | Mode::GaOnly => unlearn_loop(ctx, config, &mut |_, _| {}),
        other => Err(EngineError::WrongMode(other)),
    }
}

/// Fresh training on the corpus with every forgotten target spliced out,
/// seeded by `hp.seed`.
pub fn retrain(ctx: UnlearnContext<'_>) -> Result<RunArtifacts, EngineError> {
    let start = Instant::now();
    let remaining = splice_out(ctx.train, ctx.forget);
    let init = init_params(ctx.hp, ctx.train.item_count);
    let (params, _) = model::train(&init, &remaining, ctx.valid, ctx.hp, ctx.train_epochs)?;
    Ok(RunArtifacts::bare(Mode::Retrain, params, start.elapsed().as_secs_f64()))
}

/// A retained `(prefix, next)` pair. `prefix` has forgotten items removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainPair {
    pub session_id: u64,
    /// 1-based position of `next` in the original session.
    pub position: usize,
    pub prefix: Vec<crate::data::ItemId>,
    pub next: crate::data::ItemId,
}

/// All retained positions with a non-empty prefix, excluding forget-set
/// positions.
pub fn retain_pool(train: &Corpus, forget: &[UnlearnSample]) -> Vec<RetainPair> {
    let dropped: HashSet<(u64, usize)> = forget.iter().map(|s| (s.session_id, s.position)).collect();
    let mut pool = Vec::new();
    for s in &train.sessions {
        let mut prefix = Vec::with_capacity(s.len());
        for (i, &item) in s.items.iter().enumerate() {
            let pos = i + 1;
            if dropped.contains(&(s.id, pos)) {
                continue;
            }
            if !prefix.is_empty() {
                pool.push(RetainPair {
                    session_id: s.id,
                    position: pos,
                    prefix: prefix.clone(),
                    next: item,
                });
            }
            prefix.push(item);
        }
    }
    pool
}

/// Uniform draw (without replacement) of `size` retained pairs.
pub fn auxiliary_retain_batch(pool: &[RetainPair], size: usize, seed: u64, step: u64) -> Vec<RetainPair> {
    if size == 0 || pool.is_empty() {
        return Vec::new();
    }
    let mut rng = step_rng(seed ^ 0xA5A5_5A5A_0F0F_F0F0, step);
    rand::seq::index::sample(&mut rng, pool.len(), size.min(pool.len()))
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

fn as_sample(pair: &RetainPair) -> UnlearnSample {
    UnlearnSample {
        session_id: pair.session_id,
        position: pair.position,
        prefix: pair.prefix.clone(),
        target: pair.next,
        successor: pair.next,
    }
}

/// Per-epoch batch plan.
enum Plan {
    Batches(Vec<Vec<usize>>),
    /// Soft sampling draws batches step by step.
    Soft,
}

struct LoopState<'a> {
    ctx: UnlearnContext<'a>,
    config: &'a UnlearnRunConfig,
    params: Params,
    adam: AdamState,
    floor: Option<f64>,
    /// Reference log-probabilities per forget sample; θ_rec never changes.
    ref_log_probs: Vec<Vec<f64>>,
    retain: Vec<RetainPair>,
    artifacts_alpha: Vec<AlphaRecord>,
    step: usize,
}

impl LoopState<'_> {
    /// One optimiser step on a batch; returns the three batch-mean losses.
    fn step_on(&mut self, epoch: usize, batch: &[usize]) -> Result<[f64; 3], EngineError> {
        let ctx = self.ctx;
        let config = self.config;
        self.step += 1;

        let (losses, direction, alpha) = if config.mode == Mode::GaOnly {
            let samples: Vec<UnlearnSample> = batch.iter().map(|&i| ctx.forget[i].clone()).collect();
            let (loss, g) = model::loss_and_grad(
                &self.params,
                model::LossKind::Unlearn,
                model::Batch::Samples(&samples),
                ctx.hp,
                None,
            )?;
            ([loss, f64::NAN, f64::NAN], g, [1.0, 0.0, 0.0])
        } else {
            let pairs: Vec<(&UnlearnSample, &[f64])> =
                batch.iter().map(|&i| (&ctx.forget[i], self.ref_log_probs[i].as_slice())).collect();
            let [(l1, g1), (mut l2, mut g2), (mut l3, mut g3)] =
                batch_task_grads_with(&self.params, &pairs, ctx.hp, self.floor)?;
            if config.auxiliary_retain && config.auxiliary_retain_size > 0 {
                let aux: Vec<UnlearnSample> =
                    auxiliary_retain_batch(&self.retain, config.auxiliary_retain_size, config.seed, self.step as u64)
                        .iter()
                        .map(as_sample)
                        .collect();
                if !aux.is_empty() {
                    // an infinite floor skips the unused unlearn backward pass
                    let [_, (a2, ga2), (a3, ga3)] =
                        batch_task_grads(&self.params, ctx.rec, &aux, ctx.hp, Some(f64::INFINITY))?;
                    let (n, a) = (batch.len() as f64, aux.len() as f64);
                    let mix = |x: f64, y: f64| (n * x + a * y) / (n + a);
                    l2 = mix(l2, a2);
                    l3 = mix(l3, a3);
                    g2.iter_mut().zip(&ga2).for_each(|(x, y)| *x = mix(*x, *y));
                    g3.iter_mut().zip(&ga3).for_each(|(x, y)| *x = mix(*x, *y));
                }
            }
            let raw = [g1, g2, g3];
            // equal weights combine the raw gradients
            let grads = if config.normalize_gradients && config.mode != Mode::EqualWeights {
                pareto::normalize(&raw).try_into().expect("three gradients")
            } else {
                raw
            };
            let weights = match config.mode {
                Mode::EqualWeights => SimplexWeights::uniform(3),
                _ => pareto_weights(&grads, config)?,
            };
            let d = combine(&grads, &weights)?;
            let a = weights.as_slice();
            ([l1, l2, l3], d, [a[0], a[1], a[2]])
        };
        self.artifacts_alpha.push(AlphaRecord {
            epoch,
            step: self.step,
            alpha,
        });
        adam_step(&mut self.params, &mut self.adam, &direction, ctx.hp, ctx.hp.unlearn_rate());
        Ok(losses)
    }
}

/// Min-norm weights over the tasks whose gradient is not identically zero.
/// A task sitting at a stationary point (zero gradient) does not constrain
/// the common descent direction, and keeping it would pin the solution at
/// `d = 0`.
pub fn pareto_weights(grads: &[Vec<f64>; 3], config: &UnlearnRunConfig) -> Result<SimplexWeights, EngineError> {
    let norms: Vec<f64> = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let scale = norms.iter().copied().fold(0.0, f64::max);
    let active: Vec<usize> = (0..3).filter(|&i| norms[i] > 1e-12 * scale.max(1e-300)).collect();
    let opts = SolverOptions {
        tol: config.pareto_tol,
        max_iter: config.pareto_max_iter,
    };
    let weights = match active.len() {
        0 => SimplexWeights::uniform(3),
        1 => SimplexWeights::vertex(3, active[0]),
        _ => {
            let subset: Vec<&[f64]> = active.iter().map(|&i| grads[i].as_slice()).collect();
            let sol = solve_min_norm(&gram(&subset)?, opts)?;
            let mut full = vec![0.0; 3];
            for (&i, &a) in active.iter().zip(sol.weights.as_slice()) {
                full[i] = a;
            }
            SimplexWeights::from_raw(full)
        }
    };
    Ok(weights)
}

fn unlearn_loop(
    ctx: UnlearnContext<'_>,
    config: &UnlearnRunConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<RunArtifacts, EngineError> {
    config.validate()?;
    ctx.hp.validate()?;
    if ctx.forget.is_empty() {
        return Err(EngineError::EmptyForgetSet);
    }
    let start = Instant::now();
    let n = ctx.forget.len();
    let cur = &config.curriculum;
    let batch = cur.batch.min(n);
    let floor = config.unlearn_floor.then(|| {
        config
            .unlearn_floor_p_min
            .unwrap_or(1.0 / (10.0 * ctx.rec.item_count() as f64))
            .ln()
    });
    let retain = if config.auxiliary_retain && config.auxiliary_retain_size > 0 {
        retain_pool(ctx.train, ctx.forget)
    } else {
        Vec::new()
    };
    let mut state = LoopState {
        ctx,
        config,
        params: ctx.rec.clone(),
        adam: AdamState::new(ctx.rec.as_flat().len()),
        floor,
        ref_log_probs: ctx
            .forget
            .par_iter()
            .map(|s| model::forward(ctx.rec, &s.prefix, ctx.hp).1.log_probs)
            .collect(),
        retain,
        artifacts_alpha: Vec::new(),
        step: 0,
    };
    let guard = config.mode != Mode::GaOnly;
    let initial_normal = if guard {
        ctx.forget.iter().map(|s| model::loss_normal(ctx.rec, s, ctx.hp)).sum::<f64>() / n as f64
    } else {
        f64::NAN
    };
    let mut over_budget = 0usize;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut difficulty = Vec::new();
    let mut scoring_secs = 0.0;
    let uses_curriculum = config.mode != Mode::RandomOrder;
    let soft = uses_curriculum && cur.strategy == Strategy::Soft;
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = config.epochs * steps_per_epoch;
    let mut scores: Vec<f64> = Vec::new();

    for epoch in 1..=config.epochs {
        let plan = if !uses_curriculum {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut step_rng(config.seed, epoch as u64));
            Plan::Batches(order.chunks(batch).map(<[usize]>::to_vec).collect())
        } else if soft {
            Plan::Soft
        } else {
            let t0 = Instant::now();
            let scored = score_all_with(&state.params, ctx.forget, &state.ref_log_probs, cur.metric, ctx.hp);
            scoring_secs += t0.elapsed().as_secs_f64();
            difficulty.extend(scored.iter().map(|s| DifficultyRecord {
                sample: s.sample,
                kind: s.kind,
                score: s.score,
                epoch,
            }));
            Plan::Batches(hard_schedule(&scored, batch)?)
        };

        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        match plan {
            Plan::Batches(list) => {
                for b in &list {
                    let l = state.step_on(epoch, b)?;
                    sums.iter_mut().zip(l).for_each(|(s, v)| *s += v);
                    batches += 1;
                }
            }
            Plan::Soft => {
                let mut remaining: Vec<usize> = (0..n).collect();
                for k in 0..steps_per_epoch {
                    let global = (epoch - 1) * steps_per_epoch + k;
                    if global % cur.refresh_interval == 0 || scores.is_empty() {
                        let t0 = Instant::now();
                        let scored = score_all_with(&state.params, ctx.forget, &state.ref_log_probs, cur.metric, ctx.hp);
                        scoring_secs += t0.elapsed().as_secs_f64();
                        if k == 0 {
                            difficulty.extend(scored.iter().map(|s| DifficultyRecord {
                                sample: s.sample,
                                kind: s.kind,
                                score: s.score,
                                epoch,
                            }));
                        }
                        scores = scored.into_iter().map(|s| s.score).collect();
                    }
                    let progress = Progress::from_steps(global + 1, total_steps);
                    let log_probs = soft_log_probabilities(&scores, progress, cur.temperature);
                    let mut rng = step_rng(cur.seed, (global + 1) as u64);
                    let drawn = if cur.with_replacement {
                        let all: Vec<usize> = (0..n).collect();
                        weighted_draw(&log_probs, &all, batch, &mut rng)?
                    } else {
                        let take = batch.min(remaining.len());
                        let d = weighted_draw(&log_probs, &remaining, take, &mut rng)?;
                        let picked: HashSet<usize> = d.iter().copied().collect();
                        remaining.retain(|i| !picked.contains(i));
                        d
                    };
                    let l = state.step_on(epoch, &drawn)?;
                    sums.iter_mut().zip(l).for_each(|(s, v)| *s += v);
                    batches += 1;
                }
            }
        }
        let mean = sums.map(|s| s / batches as f64);
        loss_trace.push(LossRecord {
            epoch,
            unlearn: mean[0],
            normal: mean[1],
            kl: mean[2],
        });
        log::debug!(
            "{} epoch {epoch}: unlearn {:.4} normal {:.4} kl {:.5}",
            config.mode.as_str(),
            mean[0],
            mean[1],
            mean[2]
        );
        if guard {
            if mean[1] > config.divergence_factor * initial_normal {
                over_budget += 1;
                if over_budget >= config.divergence_patience {
                    return Err(EngineError::Divergence {
                        epoch,
                        value: mean[1],
                        initial: initial_normal,
                        factor: config.divergence_factor,
                        patience: config.divergence_patience,
                    });
                }
            } else {
                over_budget = 0;
            }
        }
        observer(epoch, &state.params);
    }

    Ok(RunArtifacts {
        mode: config.mode,
        params: state.params,
        alpha_trace: state.artifacts_alpha,
        loss_trace,
        difficulty,
        steps: state.step,
        timings: Timings {
            total_secs: start.elapsed().as_secs_f64(),
            scoring_secs,
        },
    })
}
