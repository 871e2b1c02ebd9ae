//! Empirical probability measures on R^n: moments, measure summaries seen by
//! model coefficients, and the 2-Wasserstein distance.
//!
//! The distance has three routes: an exact quantile coupling in one
//! dimension, an exact optimal assignment for small multi-dimensional clouds,
//! and a sliced Monte-Carlo surrogate for everything else.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::noise::{NoiseStream, StreamId, StreamPurpose};
use crate::stats::pairwise_sum;

/// Largest cost-matrix size (N1 * N2) accepted by the exact assignment route.
pub const EXACT_ASSIGNMENT_CAP: usize = 10_000;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted particle cloud standing in for a probability measure with finite
/// second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: DMatrix<f64>,
    weights: DVector<f64>,
}

/// The slice of a measure that model coefficients may read.
///
/// Built-in families consume only the mean; the raw second moment and the
/// full cloud are available for coefficients that declare heavier dependence.
#[derive(Debug, Clone)]
pub struct MeasureSummary {
    pub mean: DVector<f64>,
    pub second_moment: f64,
    pub cloud: Option<Arc<EmpiricalMeasure>>,
}

impl MeasureSummary {
    /// Point mass at `x`.
    pub fn dirac(x: DVector<f64>) -> Self {
        let second = x.norm_squared();
        MeasureSummary {
            mean: x,
            second_moment: second,
            cloud: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// How to evaluate the 2-Wasserstein distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum W2Method {
    /// Quantile coupling (n = 1) or optimal assignment (n >= 2, capped).
    Exact,
    /// Monte-Carlo sliced surrogate with the given projection count.
    Sliced { projections: usize, seed: u64 },
}

impl EmpiricalMeasure {
    /// Uniformly weighted cloud from a sample matrix (one row per particle).
    pub fn from_samples(points: DMatrix<f64>) -> Result<Self> {
        let n_pts = points.nrows();
        if n_pts == 0 || points.ncols() == 0 {
            return Err(Error::InvalidInput(
                "empirical measure needs at least one point with positive dimension".into(),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "empirical measure points must be finite".into(),
            ));
        }
        let w = DVector::from_element(n_pts, 1.0 / n_pts as f64);
        Ok(EmpiricalMeasure { points, weights: w })
    }

    /// Cloud from row vectors; all rows must share one dimension.
    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("empty sample set".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(
                "sample rows have unequal dimensions".into(),
            ));
        }
        let mut m = DMatrix::zeros(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            m.set_row(i, &r.transpose());
        }
        Self::from_samples(m)
    }

    /// Explicitly weighted cloud. Weights must be nonnegative and sum to one.
    pub fn with_weights(points: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if points.nrows() != weights.len() {
            return Err(Error::DimensionMismatch(
                "weight count differs from point count".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and >= 0".into()));
        }
        let total = pairwise_sum(weights.as_slice());
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, expected 1 within {WEIGHT_SUM_TOL}"
            )));
        }
        let m = Self::from_samples(points)?;
        Ok(EmpiricalMeasure { weights, ..m })
    }

    pub fn dirac(x: DVector<f64>) -> Result<Self> {
        Self::from_rows(std::slice::from_ref(&x))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    fn has_uniform_weights(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - w0).abs() <= WEIGHT_SUM_TOL)
    }

    /// Weighted mean and raw p-th absolute moment (Euclidean norm).
    pub fn moments(&self, p: u32) -> (DVector<f64>, f64) {
        assert!(p >= 1, "moment order must be >= 1");
        let dim = self.dim();
        let mut mean = DVector::zeros(dim);
        for j in 0..dim {
            let col: Vec<f64> = (0..self.len())
                .map(|i| self.weights[i] * self.points[(i, j)])
                .collect();
            mean[j] = pairwise_sum(&col);
        }
        let terms: Vec<f64> = (0..self.len())
            .map(|i| self.weights[i] * self.points.row(i).norm().powi(p as i32))
            .collect();
        (mean, pairwise_sum(&terms))
    }

    /// Summary handed to coefficient evaluations. `keep_cloud` attaches the
    /// full particle cloud for coefficients that declare they need it.
    pub fn summary(&self, keep_cloud: bool) -> MeasureSummary {
        let (mean, second) = self.moments(2);
        MeasureSummary {
            mean,
            second_moment: second,
            cloud: keep_cloud.then(|| Arc::new(self.clone())),
        }
    }

    /// One particle per row, comma-separated coordinates.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = (0..self.dim())
                .map(|j| format!("{}", self.points[(i, j)]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// 2-Wasserstein distance between two clouds.
pub fn w2_distance(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure, method: W2Method) -> Result<f64> {
    if mu1.dim() != mu2.dim() {
        return Err(Error::DimensionMismatch(format!(
            "w2 between dimensions {} and {}",
            mu1.dim(),
            mu2.dim()
        )));
    }
    match method {
        W2Method::Exact => {
            if mu1.dim() == 1 {
                let a: Vec<(f64, f64)> = (0..mu1.len())
                    .map(|i| (mu1.points[(i, 0)], mu1.weights[i]))
                    .collect();
                let b: Vec<(f64, f64)> = (0..mu2.len())
                    .map(|i| (mu2.points[(i, 0)], mu2.weights[i]))
                    .collect();
                Ok(w2_1d(a, b).sqrt())
            } else {
                w2_assignment(mu1, mu2)
            }
        }
        W2Method::Sliced { projections, seed } => w2_sliced(mu1, mu2, projections, seed),
    }
}

/// Squared 1-D W2 by quantile (monotone) coupling of two weighted atom lists.
fn w2_1d(mut a: Vec<(f64, f64)>, mut b: Vec<(f64, f64)>) -> f64 {
    a.sort_by(|p, q| p.0.total_cmp(&q.0));
    b.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut cost_terms = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let (mut wa, mut wb) = (a[0].1, b[0].1);
    loop {
        let m = wa.min(wb);
        let d = a[i].0 - b[j].0;
        cost_terms.push(m * d * d);
        wa -= m;
        wb -= m;
        if wa <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            wa = a[i].1;
        }
        if wb <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            wb = b[j].1;
        }
    }
    pairwise_sum(&cost_terms).max(0.0)
}

/// Exact multi-dimensional W2 via the optimal assignment of equal-size,
/// uniformly weighted clouds.
fn w2_assignment(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(Error::MethodCap(
            "exact multi-d W2 requires equal particle counts".into(),
        ));
    }
    if !mu1.has_uniform_weights() || !mu2.has_uniform_weights() {
        return Err(Error::MethodCap(
            "exact multi-d W2 requires uniform weights".into(),
        ));
    }
    let n = mu1.len();
    if n * n > EXACT_ASSIGNMENT_CAP {
        return Err(Error::MethodCap(format!(
            "assignment size {} exceeds cap {EXACT_ASSIGNMENT_CAP}",
            n * n
        )));
    }
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            cost[i][j] = (mu1.points.row(i) - mu2.points.row(j)).norm_squared();
        }
    }
    let total = assignment_min_cost(&cost);
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting path formulation, O(n^3)).
fn assignment_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let terms: Vec<f64> = (1..=n).map(|j| cost[matched[j] - 1][j - 1]).collect();
    pairwise_sum(&terms)
}

/// Sliced surrogate: average squared 1-D distance over seeded random
/// projection directions. A scalable stand-in, not the exact W2.
fn w2_sliced(
    mu1: &EmpiricalMeasure,
    mu2: &EmpiricalMeasure,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if projections == 0 {
        return Err(Error::InvalidInput("need at least one projection".into()));
    }
    let dim = mu1.dim();
    let stream = NoiseStream::new(seed, StreamId::new(StreamPurpose::Projection, 0));
    let mut sq = Vec::with_capacity(projections);
    for l in 0..projections {
        let mut dir = stream.standard_normals(l as u64, dim);
        let norm = dir.norm();
        if norm < 1e-12 {
            dir = DVector::from_element(dim, (dim as f64).sqrt().recip());
        } else {
            dir /= norm;
        }
        let proj = |m: &EmpiricalMeasure| -> Vec<(f64, f64)> {
            (0..m.len())
                .map(|i| ((m.points.row(i).transpose()).dot(&dir), m.weights[i]))
                .collect()
        };
        sq.push(w2_1d(proj(mu1), proj(mu2)));
    }
    Ok((pairwise_sum(&sq) / projections as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_1d(vals: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_samples(DMatrix::from_column_slice(vals.len(), 1, vals)).unwrap()
    }

    /// Exhaustive minimum over permutation couplings; the independent oracle
    /// for the exact routes on tiny clouds.
    fn w2_bruteforce(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for k in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&v| if v >= k { v + 1 } else { v }).collect();
                    q.push(k);
                    out.push(q);
                }
            }
            out
        }
        let n = a.len();
        let mut best = f64::INFINITY;
        for perm in permutations(n) {
            let cost: f64 = (0..n)
                .map(|i| (a.points().row(i) - b.points().row(perm[i])).norm_squared())
                .sum();
            best = best.min(cost);
        }
        (best / n as f64).sqrt()
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / (1u64 << 53) as f64
    }

    #[test]
    fn mean_of_two_points() {
        let m = cloud_1d(&[1.0, 3.0]);
        let (mean, p2) = m.moments(2);
        assert!((mean[0] - 2.0).abs() < 1e-15);
        assert!((p2 - 5.0).abs() < 1e-15);
    }

    #[test]
    fn point_mass_moments() {
        let m = EmpiricalMeasure::dirac(DVector::from_vec(vec![0.0, 0.0])).unwrap();
        let (mean, p2) = m.moments(2);
        assert_eq!(mean, DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(p2, 0.0);
        let d = EmpiricalMeasure::dirac(DVector::from_vec(vec![-2.0])).unwrap();
        let (mean, p3) = d.moments(3);
        assert_eq!(mean[0], -2.0);
        assert!((p3 - 8.0).abs() < 1e-15);
    }

    #[test]
    fn odd_symmetric_cloud() {
        let m = cloud_1d(&[-1.0, 1.0]);
        let (mean, p3) = m.moments(3);
        assert_eq!(mean[0], 0.0);
        assert!((p3 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(EmpiricalMeasure::from_rows(&[]).is_err());
        assert!(cloud_1d_checked(&[f64::NAN]).is_err());
        assert!(cloud_1d_checked(&[f64::INFINITY, 1.0]).is_err());
    }

    fn cloud_1d_checked(vals: &[f64]) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_samples(DMatrix::from_column_slice(vals.len(), 1, vals))
    }

    #[test]
    fn weights_must_sum_to_one() {
        let pts = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let bad = DVector::from_vec(vec![0.6, 0.6]);
        assert!(EmpiricalMeasure::with_weights(pts.clone(), bad).is_err());
        let good = DVector::from_vec(vec![0.25, 0.75]);
        assert!(EmpiricalMeasure::with_weights(pts, good).is_ok());
    }

    #[test]
    fn w2_self_is_zero_and_diracs_give_distance() {
        let m = cloud_1d(&[0.3, -1.2, 4.0]);
        assert_eq!(w2_distance(&m, &m, W2Method::Exact).unwrap(), 0.0);
        let a = EmpiricalMeasure::dirac(DVector::from_vec(vec![1.0])).unwrap();
        let b = EmpiricalMeasure::dirac(DVector::from_vec(vec![-2.5])).unwrap();
        assert!((w2_distance(&a, &b, W2Method::Exact).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn sorted_coupling_matches_bruteforce_1d() {
        let mut state = 7u64;
        for trial in 0..100 {
            let n = 2 + (trial % 5); // up to 6 points
            let xs: Vec<f64> = (0..n).map(|_| 4.0 * lcg(&mut state) - 2.0).collect();
            let ys: Vec<f64> = (0..n).map(|_| 4.0 * lcg(&mut state) - 2.0).collect();
            let a = cloud_1d(&xs);
            let b = cloud_1d(&ys);
            let exact = w2_distance(&a, &b, W2Method::Exact).unwrap();
            let brute = w2_bruteforce(&a, &b);
            assert!(
                (exact - brute).abs() < 1e-10,
                "trial {trial}: sorted {exact} vs brute {brute}"
            );
        }
    }

    #[test]
    fn assignment_matches_bruteforce_2d() {
        let mut state = 99u64;
        for trial in 0..40 {
            let n = 2 + (trial % 4); // up to 5 points
            let mk = |state: &mut u64| {
                let rows: Vec<DVector<f64>> = (0..n)
                    .map(|_| DVector::from_vec(vec![2.0 * lcg(state) - 1.0, 2.0 * lcg(state) - 1.0]))
                    .collect();
                EmpiricalMeasure::from_rows(&rows).unwrap()
            };
            let a = mk(&mut state);
            let b = mk(&mut state);
            let exact = w2_distance(&a, &b, W2Method::Exact).unwrap();
            let brute = w2_bruteforce(&a, &b);
            assert!(
                (exact - brute).abs() < 1e-10,
                "trial {trial}: assignment {exact} vs brute {brute}"
            );
        }
    }

    #[test]
    fn exact_multi_d_respects_size_cap() {
        let n = 101; // n^2 > 10^4
        let rows: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::from_vec(vec![i as f64, 0.0]))
            .collect();
        let m = EmpiricalMeasure::from_rows(&rows).unwrap();
        assert!(matches!(
            w2_distance(&m, &m, W2Method::Exact),
            Err(Error::MethodCap(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = cloud_1d(&[0.0]);
        let b = EmpiricalMeasure::dirac(DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert!(w2_distance(&a, &b, W2Method::Exact).is_err());
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        let mut state = 31u64;
        for _ in 0..50 {
            let mk = |state: &mut u64| {
                let xs: Vec<f64> = (0..5).map(|_| 6.0 * lcg(state) - 3.0).collect();
                cloud_1d(&xs)
            };
            let (a, b, c) = (mk(&mut state), mk(&mut state), mk(&mut state));
            let dab = w2_distance(&a, &b, W2Method::Exact).unwrap();
            let dba = w2_distance(&b, &a, W2Method::Exact).unwrap();
            let dac = w2_distance(&a, &c, W2Method::Exact).unwrap();
            let dcb = w2_distance(&c, &b, W2Method::Exact).unwrap();
            assert!((dab - dba).abs() < 1e-12);
            assert!(dab <= dac + dcb + 1e-9);
        }
    }

    #[test]
    fn sliced_is_deterministic_and_sane() {
        let rows_a: Vec<DVector<f64>> = (0..20)
            .map(|i| DVector::from_vec(vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]))
            .collect();
        let rows_b: Vec<DVector<f64>> = rows_a.iter().map(|r| r + DVector::from_vec(vec![1.0, 0.0])).collect();
        let a = EmpiricalMeasure::from_rows(&rows_a).unwrap();
        let b = EmpiricalMeasure::from_rows(&rows_b).unwrap();
        let method = W2Method::Sliced { projections: 64, seed: 5 };
        let d1 = w2_distance(&a, &b, method).unwrap();
        let d2 = w2_distance(&a, &b, method).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
        assert_eq!(w2_distance(&a, &a, method).unwrap(), 0.0);
    }

    #[test]
    fn weighted_1d_quantile_coupling() {
        // {0 w 3/4, 1 w 1/4} vs {0 w 1/4, 1 w 3/4}: half the mass moves by 1.
        let pts = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let a = EmpiricalMeasure::with_weights(pts.clone(), DVector::from_vec(vec![0.75, 0.25])).unwrap();
        let b = EmpiricalMeasure::with_weights(pts, DVector::from_vec(vec![0.25, 0.75])).unwrap();
        let d = w2_distance(&a, &b, W2Method::Exact).unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
