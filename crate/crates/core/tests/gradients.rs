//! Analytic gradients against central finite differences, and the forward
//! pass against an independent dense-matrix GRU.

mod common;

use cau::data::{ItemId, Session, UnlearnSample};
use cau::model::{self, Batch, LossKind, Params};
use common::*;
use nalgebra::{DMatrix, DVector};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
/// Denominator floor for coordinates whose gradient is essentially zero.
const FLOOR: f64 = 1e-4;

fn setup(seed: u64) -> (Params, Params, Vec<Session>, Vec<UnlearnSample>) {
    let mut r = rng(seed);
    let params = random_params(20, 8, 0.6, &mut r);
    let reference = random_params(20, 8, 0.6, &mut r);
    let sessions = random_sessions(20, 20, 3..=13, &mut r);
    let samples = random_samples(&sessions, &mut r);
    assert_eq!(samples.len(), 20);
    (params, reference, sessions, samples)
}

fn check_sample_loss(kind: LossKind) -> f64 {
    let (params, reference, _, samples) = setup(11);
    let hp = toy_hp(8, 0);
    let mut worst = 0.0f64;
    for s in &samples {
        let one = std::slice::from_ref(s);
        let g = model::grad(&params, kind, Batch::Samples(one), &hp, Some(&reference)).unwrap();
        let fd = fd_gradient(&params, STEP, |p| match kind {
            LossKind::Unlearn => model::loss_unlearn(p, s, &hp),
            LossKind::Normal => model::loss_normal(p, s, &hp),
            LossKind::Kl => model::loss_kl(p, &reference, s, &hp),
            LossKind::Rec => unreachable!(),
        });
        // The padding row is excluded from updates; its true derivative is zero too.
        worst = worst.max(max_rel_error(&g[8..], &fd[8..], FLOOR));
        assert!(g[..8].iter().all(|&v| v == 0.0));
    }
    worst
}

#[test]
fn unlearn_gradient_matches_finite_differences() {
    let e = check_sample_loss(LossKind::Unlearn);
    assert!(e <= TOL, "max relative error {e:e}");
}

#[test]
fn normal_gradient_matches_finite_differences() {
    let e = check_sample_loss(LossKind::Normal);
    assert!(e <= TOL, "max relative error {e:e}");
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let e = check_sample_loss(LossKind::Kl);
    assert!(e <= TOL, "max relative error {e:e}");
}

#[test]
fn rec_gradient_matches_finite_differences() {
    let (params, _, sessions, _) = setup(12);
    // L = 4 forces the separate-window path for long sessions.
    for max_prefix_len in [10, 4] {
        let hp = cau::model::HyperParams {
            max_prefix_len,
            ..toy_hp(8, 0)
        };
        for s in &sessions {
            let g = model::grad(&params, LossKind::Rec, Batch::Sessions(std::slice::from_ref(s)), &hp, None).unwrap();
            let fd = fd_gradient(&params, STEP, |p| model::loss_rec(p, s, &hp));
            let e = max_rel_error(&g[8..], &fd[8..], FLOOR);
            assert!(e <= TOL, "L={max_prefix_len}: max relative error {e:e}");
        }
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let (params, reference, _, samples) = setup(13);
    let hp = toy_hp(8, 0);
    for kind in [LossKind::Unlearn, LossKind::Normal, LossKind::Kl] {
        let (loss, g) = model::loss_and_grad(&params, kind, Batch::Samples(&samples), &hp, Some(&reference)).unwrap();
        let mut mean = vec![0.0; g.len()];
        let mut mean_loss = 0.0;
        for s in &samples {
            let (l, gs) =
                model::loss_and_grad(&params, kind, Batch::Samples(std::slice::from_ref(s)), &hp, Some(&reference))
                    .unwrap();
            mean_loss += l / samples.len() as f64;
            mean.iter_mut().zip(&gs).for_each(|(m, v)| *m += v / samples.len() as f64);
        }
        assert!((loss - mean_loss).abs() < 1e-12);
        assert!(max_rel_error(&g, &mean, 1e-12) < 1e-9, "{kind:?}");
    }
}

#[test]
fn shared_pass_task_grads_match_single_loss_grads() {
    let (params, reference, _, samples) = setup(14);
    let hp = toy_hp(8, 0);
    let tasks = model::batch_task_grads(&params, &reference, &samples, &hp, None).unwrap();
    for (kind, (loss, g)) in [LossKind::Unlearn, LossKind::Normal, LossKind::Kl].into_iter().zip(tasks.iter()) {
        let (l, single) = model::loss_and_grad(&params, kind, Batch::Samples(&samples), &hp, Some(&reference)).unwrap();
        assert!((l - loss).abs() < 1e-12);
        assert!(max_rel_error(g, &single, 1e-12) < 1e-9, "{kind:?}");
    }
}

#[test]
fn unlearn_gradient_is_negated_cross_entropy_gradient() {
    let (params, _, _, samples) = setup(15);
    let hp = toy_hp(8, 0);
    for s in &samples {
        // Cross-entropy on (prefix, target) is the normal loss with target as successor.
        let ce = UnlearnSample {
            successor: s.target,
            ..s.clone()
        };
        let gu = model::grad(&params, LossKind::Unlearn, Batch::Samples(std::slice::from_ref(s)), &hp, None).unwrap();
        let gc = model::grad(&params, LossKind::Normal, Batch::Samples(std::slice::from_ref(&ce)), &hp, None).unwrap();
        assert!(gu.iter().zip(&gc).all(|(a, b)| (a + b).abs() < 1e-14));
    }
}

#[test]
fn kl_gradient_vanishes_at_reference() {
    let (params, _, _, samples) = setup(16);
    let hp = toy_hp(8, 0);
    let g = model::grad(&params, LossKind::Kl, Batch::Samples(&samples), &hp, Some(&params)).unwrap();
    assert!(g.iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn kl_is_non_negative_on_random_pairs() {
    let mut r = rng(17);
    let hp = toy_hp(8, 0);
    for _ in 0..100 {
        let a = random_params(20, 8, 1.0, &mut r);
        let b = random_params(20, 8, 1.0, &mut r);
        let sessions = random_sessions(1, 20, 3..=8, &mut r);
        let s = &random_samples(&sessions, &mut r)[0];
        assert!(model::loss_kl(&a, &b, s, &hp) >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// Independent forward pass

struct DenseGru {
    e: DMatrix<f64>,
    w: [DMatrix<f64>; 3],
    u: [DMatrix<f64>; 3],
    b: [DVector<f64>; 3],
}

impl DenseGru {
    fn from_params(p: &Params) -> Self {
        let (n, d) = (p.item_count(), p.dim());
        let flat = p.as_flat();
        let e = DMatrix::from_row_slice(n + 1, d, &flat[..(n + 1) * d]);
        let mut off = (n + 1) * d;
        let mut block = |rows: usize, cols: usize| {
            let m = DMatrix::from_row_slice(rows, cols, &flat[off..off + rows * cols]);
            off += rows * cols;
            m
        };
        let w = [block(d, d), block(d, d), block(d, d)];
        let u = [block(d, d), block(d, d), block(d, d)];
        let b = [block(d, 1), block(d, 1), block(d, 1)].map(|m| DVector::from_column_slice(m.as_slice()));
        DenseGru { e, w, u, b }
    }

    fn state(&self, prefix: &[ItemId], max_len: usize) -> DVector<f64> {
        let d = self.e.ncols();
        let mut h = DVector::zeros(d);
        let start = prefix.len().saturating_sub(max_len);
        for item in &prefix[start..] {
            let x: DVector<f64> = self.e.row(item.index()).transpose();
            let sig = |v: DVector<f64>| v.map(|a| 1.0 / (1.0 + (-a).exp()));
            let z = sig(&self.w[0] * &x + &self.u[0] * &h + &self.b[0]);
            let r = sig(&self.w[1] * &x + &self.u[1] * &h + &self.b[1]);
            let c = (&self.w[2] * &x + &self.u[2] * r.component_mul(&h) + &self.b[2]).map(f64::tanh);
            h = z.map(|v| 1.0 - v).component_mul(&h) + z.component_mul(&c);
        }
        h
    }

    fn log_prob(&self, prefix: &[ItemId], target: ItemId, max_len: usize) -> f64 {
        let h = self.state(prefix, max_len);
        let logits = self.e.rows(1, self.e.nrows() - 1) * h;
        let max = logits.max();
        let lse = max + logits.map(|l| (l - max).exp()).sum().ln();
        logits[target.index() - 1] - lse
    }

    fn loss_rec(&self, session: &Session, max_len: usize) -> f64 {
        let n = session.len();
        (1..n)
            .map(|t| -self.log_prob(&session.items[..t], session.items[t], max_len))
            .sum::<f64>()
            / (n - 1) as f64
    }
}

#[test]
fn loss_rec_matches_independent_forward() {
    let mut r = rng(18);
    let params = random_params(20, 8, 0.8, &mut r);
    let dense = DenseGru::from_params(&params);
    for max_prefix_len in [10, 3] {
        let hp = cau::model::HyperParams {
            max_prefix_len,
            ..toy_hp(8, 0)
        };
        for s in random_sessions(30, 20, 2..=15, &mut r) {
            let ours = model::loss_rec(&params, &s, &hp);
            let theirs = dense.loss_rec(&s, max_prefix_len);
            assert!((ours - theirs).abs() < 1e-12, "{ours} vs {theirs}");
        }
    }
}

#[test]
fn normal_loss_is_skip_prediction_term() {
    let mut r = rng(19);
    let params = random_params(20, 8, 0.8, &mut r);
    let dense = DenseGru::from_params(&params);
    let hp = toy_hp(8, 0);
    let sessions = random_sessions(20, 20, 3..=12, &mut r);
    for s in random_samples(&sessions, &mut r) {
        let direct = -dense.log_prob(&s.prefix, s.successor, hp.max_prefix_len);
        assert!((model::loss_normal(&params, &s, &hp) - direct).abs() < 1e-12);
        let up = dense.log_prob(&s.prefix, s.target, hp.max_prefix_len);
        assert!((model::loss_unlearn(&params, &s, &hp) - up).abs() < 1e-12);
    }
}

