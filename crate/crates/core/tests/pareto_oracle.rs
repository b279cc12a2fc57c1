//! Min-norm solver against brute-force simplex search.

mod common;

use cau::pareto::{combine, gram, solve_min_norm, SimplexWeights, SolverOptions};
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_instance(r: &mut impl Rng) -> Vec<Vec<f64>> {
    let dim = r.random_range(1..=32);
    (0..3)
        .map(|_| (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Minimum of `αᵀMα` over the 0.01-step grid on the 3-simplex.
fn grid_min(g: &[Vec<f64>]) -> f64 {
    let m = gram(g).unwrap();
    let mut best = f64::INFINITY;
    for i in 0..=100 {
        for j in 0..=100 - i {
            let a = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
            best = best.min(m.quadratic(&a));
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn matches_grid_search_on_random_instances() {
    let mut r = rng(31);
    let opts = SolverOptions::default();
    for case in 0..200 {
        let g = random_instance(&mut r);
        let sol = solve_min_norm(&gram(&g).unwrap(), opts).unwrap();
        let grid = grid_min(&g);
        assert!((sol.objective - grid).abs() <= 0.01, "case {case}: {} vs {grid}", sol.objective);
        assert!(sol.objective <= grid + 1e-9, "case {case}: solver above grid");
    }
}

#[test]
fn descent_property_holds() {
    let mut r = rng(32);
    let opts = SolverOptions::default();
    for case in 0..200 {
        let g = random_instance(&mut r);
        let sol = solve_min_norm(&gram(&g).unwrap(), opts).unwrap();
        let d = combine(&g, &sol.weights).unwrap();
        let dd = dot(&d, &d);
        for (i, gi) in g.iter().enumerate() {
            assert!(
                dot(gi, &d) >= dd - opts.tol,
                "case {case} task {i}: {} < {dd}",
                dot(gi, &d)
            );
        }
    }
}

#[test]
fn gram_is_positive_semidefinite() {
    let mut r = rng(33);
    for _ in 0..100 {
        let m = gram(&random_instance(&mut r)).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            assert!(m.quadratic(&x) >= -1e-12);
        }
    }
}

#[test]
fn orthogonal_unit_gradients_give_uniform_weights() {
    let g = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let sol = solve_min_norm(&gram(&g).unwrap(), SolverOptions::default()).unwrap();
    for &a in sol.weights.as_slice() {
        assert!((a - 1.0 / 3.0).abs() < 1e-9);
    }
    assert!((sol.objective - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn opposing_gradients_reach_zero() {
    let g = vec![vec![1.0, 2.0], vec![-1.0, -2.0], vec![0.5, 3.0]];
    let sol = solve_min_norm(&gram(&g).unwrap(), SolverOptions::default()).unwrap();
    assert!(sol.objective < 1e-9, "{sol:?}");
    assert!(sol.weights.as_slice()[2] < 1e-6);
}

proptest! {
    #[test]
    fn weights_stay_on_simplex(raw in prop::collection::vec(-5.0f64..5.0, 3 * 6)) {
        let g: Vec<Vec<f64>> = raw.chunks(6).map(<[f64]>::to_vec).collect();
        let sol = solve_min_norm(&gram(&g).unwrap(), SolverOptions::default()).unwrap();
        prop_assert!(sol.weights.is_valid(1e-12));
        prop_assert!(sol.objective >= -1e-12);
        let uniform = gram(&g).unwrap().quadratic(SimplexWeights::uniform(3).as_slice());
        prop_assert!(sol.objective <= uniform + 1e-12);
    }
}
