//! Min-norm point in the convex hull of task gradients (MGDA).
//!
//! The solver only sees the Gram matrix `M_ij = g_i · g_j`, so at most `m`
//! full gradient vectors are ever held. The objective `‖Σ α_i g_i‖²` becomes
//! `αᵀ M α` over the probability simplex and is minimised with Frank–Wolfe
//! using exact line search and away steps.

use thiserror::Error;

pub const MAX_TASKS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ParetoError {
    #[error("need between 2 and {MAX_TASKS} gradients, got {0}")]
    TaskCount(usize),
    #[error("gradient {index} has length {len}, expected {expected}")]
    LengthMismatch { index: usize, len: usize, expected: usize },
    #[error("gram matrix is not square or holds non-finite entries")]
    BadMatrix,
    #[error("weights do not match the number of gradients")]
    WeightCount,
}

/// Symmetric `m × m` matrix of pairwise gradient dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ParetoError> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(ParetoError::BadMatrix);
        }
        Ok(GramMatrix {
            m,
            entries: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    fn mul(&self, alpha: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| (0..self.m).map(|j| self.get(i, j) * alpha[j]).sum())
            .collect()
    }

    /// `αᵀ M α`.
    pub fn quadratic(&self, alpha: &[f64]) -> f64 {
        let ma = self.mul(alpha);
        alpha.iter().zip(&ma).map(|(a, b)| a * b).sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact pairwise dot products.
pub fn gram<G: AsRef<[f64]>>(gradients: &[G]) -> Result<GramMatrix, ParetoError> {
    let m = gradients.len();
    if !(2..=MAX_TASKS).contains(&m) {
        return Err(ParetoError::TaskCount(m));
    }
    let expected = gradients[0].as_ref().len();
    for (index, g) in gradients.iter().enumerate() {
        if g.as_ref().len() != expected {
            return Err(ParetoError::LengthMismatch {
                index,
                len: g.as_ref().len(),
                expected,
            });
        }
    }
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot(gradients[i].as_ref(), gradients[j].as_ref());
            entries[i * m + j] = v;
            entries[j * m + i] = v;
        }
    }
    Ok(GramMatrix { m, entries })
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn uniform(m: usize) -> Self {
        SimplexWeights(vec![1.0 / m as f64; m])
    }

    pub fn vertex(m: usize, i: usize) -> Self {
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        SimplexWeights(v)
    }

    /// Clamps negatives to zero and renormalises.
    pub fn from_raw(mut raw: Vec<f64>) -> Self {
        raw.iter_mut().for_each(|v| {
            if !(*v > 0.0) {
                *v = 0.0
            }
        });
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter_mut().for_each(|v| *v /= total);
            SimplexWeights(raw)
        } else {
            SimplexWeights::uniform(raw.len())
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|&a| a >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    pub weights: SimplexWeights,
    /// `‖Σ α_i g_i‖²` at the returned weights.
    pub objective: f64,
    /// Frank–Wolfe duality gap `αᵀMα − min_j (Mα)_j`.
    pub gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-6, max_iter: 100 }
    }
}

fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Minimises `αᵀ M α` over the simplex.
///
/// Starts at uniform `α`. Each iteration computes the toward vertex
/// `j = argmin (Mα)_j` (lowest index on ties) and the away vertex among the
/// active set, moves along whichever direction has the larger gap, and picks
/// the step analytically. Stops once the duality gap drops to `tol` or the
/// step makes no progress. If the gap target was missed, an exact face solve
/// over the support replaces the iterate when it is optimal. An all-zero
/// matrix returns uniform weights.
pub fn solve_min_norm(m: &GramMatrix, opts: SolverOptions) -> Result<MinNormSolution, ParetoError> {
    let n = m.size();
    if n == 0 || m.entries.iter().any(|v| !v.is_finite()) {
        return Err(ParetoError::BadMatrix);
    }
    let mut alpha = vec![1.0 / n as f64; n];
    if m.entries.iter().all(|&v| v == 0.0) {
        return Ok(MinNormSolution {
            weights: SimplexWeights(alpha),
            objective: 0.0,
            gap: 0.0,
            iterations: 0,
        });
    }

    let mut iterations = 0;
    let mut ma = m.mul(&alpha);
    let mut obj = dot(&alpha, &ma);
    let mut gap;
    loop {
        let toward = argmin_lowest(&ma);
        gap = obj - ma[toward];
        if gap <= opts.tol || iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let mut away = None;
        for i in 0..n {
            if alpha[i] > 0.0 && away.map_or(true, |a: usize| ma[i] > ma[a]) {
                away = Some(i);
            }
        }
        let away_gap = away.map_or(f64::NEG_INFINITY, |a| ma[a] - obj);

        // direction = e_toward - α  or  α - e_away
        let (dir, max_step): (Vec<f64>, f64) = match away {
            Some(a) if away_gap > gap && alpha[a] < 1.0 => {
                let dir = (0..n).map(|i| alpha[i] - f64::from(u8::from(i == a))).collect();
                (dir, alpha[a] / (1.0 - alpha[a]))
            }
            _ => {
                let dir = (0..n).map(|i| f64::from(u8::from(i == toward)) - alpha[i]).collect();
                (dir, 1.0)
            }
        };
        let slope = dot(&dir, &ma);
        let curvature = m.quadratic(&dir);
        if slope >= 0.0 || curvature <= 0.0 {
            break;
        }
        let step = (-slope / curvature).clamp(0.0, max_step);
        if step == 0.0 {
            break;
        }
        for (a, d) in alpha.iter_mut().zip(&dir) {
            *a += step * d;
        }
        if step == max_step && max_step != 1.0 {
            // away step dropped a vertex exactly
            if let Some(a) = away {
                alpha[a] = 0.0;
            }
        }
        alpha.iter_mut().for_each(|v| *v = v.max(0.0));
        let total: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|v| *v /= total);

        let prev = obj;
        ma = m.mul(&alpha);
        obj = dot(&alpha, &ma);
        if !(obj < prev) {
            break;
        }
    }
    if gap > opts.tol {
        if let Some(exact) = polish(m, &alpha) {
            alpha = exact;
        }
    }
    let weights = SimplexWeights::from_raw(alpha);
    let ma = m.mul(weights.as_slice());
    let objective = dot(weights.as_slice(), &ma);
    let gap = objective - ma[argmin_lowest(&ma)];
    Ok(MinNormSolution {
        weights,
        objective,
        gap,
        iterations,
    })
}

/// Solves `M_SS α_S = λ 1, Σ α_S = 1` by Gaussian elimination with partial
/// pivoting. `None` if singular or any weight is negative.
fn face_solve(m: &GramMatrix, support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut a = vec![vec![0.0; k + 2]; k + 1];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r][c] = m.get(i, j);
        }
        a[r][k] = -1.0;
        a[k][r] = 1.0;
    }
    a[k][k + 1] = 1.0;
    for col in 0..=k {
        let pivot = (col..=k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..=k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..k + 2 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut alpha = vec![0.0; m.size()];
    for (r, &i) in support.iter().enumerate() {
        let v = a[r][k + 1] / a[r][r];
        if !(v >= 0.0) {
            return None;
        }
        alpha[i] = v;
    }
    Some(alpha)
}

/// Exact minimiser over faces spanned by subsets of the current support,
/// used when Frank–Wolfe stops short of its gap target. Picks the face point
/// with the smallest objective that is globally optimal up to rounding.
fn polish(m: &GramMatrix, alpha: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..m.size()).filter(|&i| alpha[i] > 0.0).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << support.len()) {
        let face: Vec<usize> = (0..support.len()).filter(|b| mask >> b & 1 == 1).map(|b| support[b]).collect();
        let Some(cand) = face_solve(m, &face) else { continue };
        let ma = m.mul(&cand);
        let obj = dot(&cand, &ma);
        let optimal = ma.iter().all(|&v| v >= obj - 1e-9 * (1.0 + obj.abs()));
        if optimal && best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, cand));
        }
    }
    best.map(|(_, a)| a)
}

/// `Σ α_i g_i`.
pub fn combine<G: AsRef<[f64]>>(gradients: &[G], alpha: &SimplexWeights) -> Result<Vec<f64>, ParetoError> {
    if gradients.len() != alpha.0.len() || gradients.is_empty() {
        return Err(ParetoError::WeightCount);
    }
    let len = gradients[0].as_ref().len();
    let mut out = vec![0.0; len];
    for (index, (g, &a)) in gradients.iter().zip(&alpha.0).enumerate() {
        let g = g.as_ref();
        if g.len() != len {
            return Err(ParetoError::LengthMismatch {
                index,
                len: g.len(),
                expected: len,
            });
        }
        if a != 0.0 {
            out.iter_mut().zip(g).for_each(|(o, v)| *o += a * v);
        }
    }
    Ok(out)
}

/// Rescales each gradient to unit ℓ2 norm; zero vectors stay zero.
pub fn normalize<G: AsRef<[f64]>>(gradients: &[G]) -> Vec<Vec<f64>> {
    gradients
        .iter()
        .map(|g| {
            let g = g.as_ref();
            let norm = dot(g, g).sqrt();
            if norm > 0.0 {
                g.iter().map(|v| v / norm).collect()
            } else {
                g.to_vec()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(grads: &[Vec<f64>]) -> MinNormSolution {
        solve_min_norm(&gram(grads).unwrap(), SolverOptions::default()).unwrap()
    }

    #[test]
    fn gram_of_equal_vectors() {
        let g = vec![2.0, 0.0];
        let m = gram(&[g.clone(), g]).unwrap();
        assert_eq!(m, GramMatrix::from_rows(&[vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap());
    }

    #[test]
    fn gram_of_orthonormal_is_identity() {
        let m = gram(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(m, GramMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    }

    #[test]
    fn gram_rejects_bad_input() {
        assert_eq!(gram(&[vec![1.0]]), Err(ParetoError::TaskCount(1)));
        assert!(matches!(
            gram(&[vec![1.0], vec![1.0, 2.0]]),
            Err(ParetoError::LengthMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn opposite_gradients_balance() {
        let s = solve(&[vec![1.0, -2.0, 0.5], vec![-1.0, 2.0, -0.5]]);
        assert!((s.weights.as_slice()[0] - 0.5).abs() < 1e-9);
        assert!(s.objective.abs() < 1e-12);
    }

    #[test]
    fn identical_gradients_any_simplex_point() {
        let g = vec![0.3, -1.2, 2.0];
        let norm2 = dot(&g, &g);
        let s = solve(&[g.clone(), g.clone(), g]);
        assert!(s.weights.is_valid(1e-12));
        assert!((s.objective - norm2).abs() < 1e-9);
    }

    #[test]
    fn axis_and_diagonal() {
        let s = solve(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!((s.objective - 0.5).abs() < 1e-9);
        let d = combine(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], &s.weights).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_gradients_give_uniform() {
        let s = solve(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]);
        assert_eq!(s.weights, SimplexWeights::uniform(3));
    }

    #[test]
    fn zero_task_absorbs_weight() {
        let s = solve(&[vec![1.0, 2.0], vec![-0.5, 1.0], vec![0.0, 0.0]]);
        assert_eq!(s.weights.as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let m = GramMatrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]]).unwrap();
        assert_eq!(solve_min_norm(&m, SolverOptions::default()), Err(ParetoError::BadMatrix));
    }

    #[test]
    fn combine_picks_vertex_and_identical() {
        let gs = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        assert_eq!(combine(&gs, &SimplexWeights::vertex(2, 0)).unwrap(), gs[0]);
        let same = vec![vec![0.5, 0.25], vec![0.5, 0.25]];
        let w = SimplexWeights::from_raw(vec![0.3, 0.7]);
        let c = combine(&same, &w).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.25).abs() < 1e-15);
        assert_eq!(combine(&gs, &SimplexWeights::uniform(3)), Err(ParetoError::WeightCount));
    }

    #[test]
    fn degenerate_face_is_polished() {
        let s = solve(&[vec![1.0, 2.0], vec![-1.0, -2.0], vec![0.5, 3.0]]);
        assert!(s.objective < 1e-12);
        assert!(s.gap <= 1e-6);
    }

    #[test]
    fn from_raw_renormalises() {
        let w = SimplexWeights::from_raw(vec![-1e-17, 0.5, 1.5]);
        assert_eq!(w.as_slice(), &[0.0, 0.25, 0.75]);
    }
}
