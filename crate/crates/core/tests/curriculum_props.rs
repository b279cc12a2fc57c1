//! Curriculum scheduling and sampling properties.

mod common;

use cau::curriculum::{
    dif_embedding, hard_schedule, soft_draw_batch, soft_probabilities, DifficultyKind, DifficultyScore, Progress,
};
use cau::eval::{rank_target, RankOptions};
use common::*;
use rand::Rng;

fn scored(values: &[f64]) -> Vec<DifficultyScore> {
    values
        .iter()
        .enumerate()
        .map(|(sample, &score)| DifficultyScore {
            sample,
            score,
            kind: DifficultyKind::Gradient,
        })
        .collect()
}

fn mean_of(batch: &[usize], values: &[f64]) -> f64 {
    batch.iter().map(|&i| values[i]).sum::<f64>() / batch.len() as f64
}

#[test]
fn hard_batch_means_non_decreasing() {
    let mut r = rng(41);
    for _ in 0..100 {
        let n = r.random_range(1..300);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = r.random_range(1..40);
        let schedule = hard_schedule(&scored(&values), batch).unwrap();
        let means: Vec<f64> = schedule.iter().map(|b| mean_of(b, &values)).collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn hard_schedule_is_a_permutation() {
    let mut r = rng(42);
    for _ in 0..50 {
        let n = r.random_range(1..200);
        // coarse values force many ties
        let values: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..5u8))).collect();
        let mut flat: Vec<usize> = hard_schedule(&scored(&values), 7).unwrap().concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn soft_probabilities_sum_to_one_and_are_monotone() {
    let mut r = rng(43);
    for _ in 0..100 {
        let values: Vec<f64> = (0..r.random_range(1..100)).map(|_| r.random_range(-1.0..1.0)).collect();
        let t = r.random_range(0.0..1.0);
        let p = soft_probabilities(&values, Progress::new(t), 2.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        for w in idx.windows(2) {
            let (lo, hi) = (p[w[0]], p[w[1]]);
            if t < 0.5 {
                assert!(lo >= hi);
            } else {
                assert!(lo <= hi);
            }
        }
    }
}

/// Every frequency within 3σ of its binomial expectation.
fn within_three_sigma(counts: &[usize], expected: &[f64], draws: usize) -> bool {
    counts.iter().zip(expected).all(|(&c, &p)| {
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        (c as f64 / draws as f64 - p).abs() <= 3.0 * sigma
    })
}

#[test]
fn single_draw_frequencies_follow_probabilities() {
    let values = [-1.0, -0.5, 0.0, 0.2, 0.9];
    let t = Progress::new(0.1);
    let p = soft_probabilities(&values, t, 2.0);
    let mut counts = [0usize; 5];
    for step in 0..10_000u64 {
        counts[soft_draw_batch(&values, t, 2.0, 1, 7, step).unwrap()[0]] += 1;
    }
    assert!(within_three_sigma(&counts, &p, 10_000), "{counts:?} vs {p:?}");
}

#[test]
fn midpoint_inclusion_is_uniform() {
    let values: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let batch = 5;
    let mut counts = vec![0usize; 20];
    for step in 0..10_000u64 {
        for i in soft_draw_batch(&values, Progress::new(0.5), 2.0, batch, 8, step).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = vec![batch as f64 / 20.0; 20];
    assert!(within_three_sigma(&counts, &expected, 10_000), "{counts:?}");
}

#[test]
fn easy_sample_dominates_early() {
    let mut values = vec![0.5; 10];
    values[3] = -1.0;
    let mut counts = vec![0usize; 10];
    for step in 0..10_000u64 {
        for i in soft_draw_batch(&values, Progress::new(0.0), 2.0, 3, 9, step).unwrap() {
            counts[i] += 1;
        }
    }
    assert!(counts.iter().enumerate().all(|(i, &c)| i == 3 || c < counts[3]));
}

#[test]
fn embedding_difficulty_tracks_rank() {
    let toy = toy_pipeline(600, 40, 15, 5);
    let opts = RankOptions::default();
    let (mut top, mut far) = (Vec::new(), Vec::new());
    for s in &toy.forget {
        let score = dif_embedding(&toy.rec, s, &toy.hp);
        match rank_target(&toy.rec, &s.prefix, s.target, &toy.hp, opts) {
            1 => top.push(score),
            r if r > 10 => far.push(score),
            _ => {}
        }
    }
    assert!(!top.is_empty() && !far.is_empty(), "{} top, {} far", top.len(), far.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&top) > mean(&far), "{} vs {}", mean(&top), mean(&far));
}
