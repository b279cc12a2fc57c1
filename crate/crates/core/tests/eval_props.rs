//! Ranking metric properties.

mod common;

use cau::data::ItemId;
use cau::eval::{self, ndcg_from_ranks, popularity_recall, rank_target, recall_from_ranks, RankOptions};
use cau::model::rank_of;
use common::*;
use rand::Rng;

#[test]
fn random_model_recall_is_near_chance() {
    let mut r = rng(51);
    let params = random_params(100, 8, 0.5, &mut r);
    let test = corpus(random_sessions(1000, 100, 2..=8, &mut r), 100);
    let recall = eval::recall_at_k(&params, &test, &toy_hp(8, 0), 10);
    assert!((recall - 0.10).abs() <= 0.03, "{recall}");
}

#[test]
fn ndcg_bounded_by_recall_and_monotone_in_k() {
    let mut r = rng(52);
    for _ in 0..100 {
        let ranks: Vec<usize> = (0..r.random_range(1..50)).map(|_| r.random_range(1..=60)).collect();
        let mut prev = (0.0, 0.0);
        for k in [1, 5, 10, 20, 50] {
            let (rec, ndcg) = (recall_from_ranks(&ranks, k), ndcg_from_ranks(&ranks, k));
            assert!(ndcg <= rec + 1e-15);
            assert!(rec >= prev.0 && ndcg >= prev.1);
            prev = (rec, ndcg);
        }
        assert_eq!(recall_from_ranks(&ranks, 1), ndcg_from_ranks(&ranks, 1));
    }
}

#[test]
fn known_ranks() {
    let ranks = [1, 3, 11];
    assert!((recall_from_ranks(&ranks, 10) - 2.0 / 3.0).abs() < 1e-15);
    let expected = (1.0 + 1.0 / 4f64.log2()) / 3.0;
    assert!((ndcg_from_ranks(&ranks, 10) - expected).abs() < 1e-15);
    assert_eq!(recall_from_ranks(&[], 10), 0.0);
}

#[test]
fn ties_rank_lower_ids_first() {
    let logits = [0.5, 0.5, 0.5, 0.1];
    assert_eq!(rank_of(&logits, ItemId(1)), 1);
    assert_eq!(rank_of(&logits, ItemId(3)), 3);
    assert_eq!(rank_of(&logits, ItemId(4)), 4);
}

#[test]
fn exclude_seen_only_helps_the_target() {
    let mut r = rng(53);
    let params = random_params(30, 8, 0.8, &mut r);
    let hp = toy_hp(8, 0);
    for s in random_sessions(100, 30, 3..=10, &mut r) {
        let (prefix, target) = (&s.items[..s.len() - 1], s.items[s.len() - 1]);
        let plain = rank_target(&params, prefix, target, &hp, RankOptions::default());
        let excl = rank_target(&params, prefix, target, &hp, RankOptions { exclude_seen: true });
        assert!(excl <= plain);
    }
}

#[test]
fn trained_model_beats_popularity() {
    let spec = cau::synth::SynthSpec {
        n_sessions: 1000,
        n_items: 200,
        sharpness: 200.0,
        zipf_exponent: 0.5,
        seed: 6,
        ..Default::default()
    };
    let toy = toy_from_spec(&spec, 20);
    let pop = popularity_recall(&toy.split.train, &toy.split.valid, 10);
    let recall = eval::recall_at_k(&toy.rec, &toy.split.valid, &toy.hp, 10);
    println!("valid R@10 {recall:.4}, popularity {pop:.4}");
    assert!(recall >= 2.0 * pop, "{recall} vs popularity {pop}");
}

#[test]
fn report_without_forget_set_has_no_forgetting_metrics() {
    let toy = toy_pipeline(200, 20, 2, 7);
    let rep = eval::report(&toy.rec, &toy.hp, &toy.split.test, &[], 3.0, RankOptions::default());
    assert!(rep.hit_u_1.is_none() && rep.u_beta.is_none());
    assert_eq!(rep.test_positions, toy.split.test.len());
}
