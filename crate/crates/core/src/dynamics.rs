//! Vote-stream dynamics: Shannon entropy, Lyapunov exponents and the
//! equilibrium rule that decides when voting on a story may stop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("entropy of an empty count map is undefined")]
    EmptyCounts,
    #[error("trajectory diverged beyond representable range at step {0}")]
    NumericalOverflow(usize),
    #[error("integration horizon must satisfy t1 > t0 and dt > 0")]
    BadHorizon,
    #[error("series needs at least 4 votes, got {0}")]
    TooShort(usize),
    #[error("vote values must be -1 or +1, got {0}")]
    BadVote(i64),
    #[error("state dimension {0} unsupported (1..=8)")]
    BadDimension(usize),
    #[error("invalid equilibrium parameters: {0}")]
    BadParams(&'static str),
}

/// Guard substituted for zero differences in [`lyapunov_from_series`].
pub const SERIES_EPSILON: f64 = 1e-12;
/// Tangent vectors are re-orthonormalized after this many steps.
pub const REORTHONORMALIZE_EVERY: usize = 10;
pub const MAX_STATE_DIM: usize = 8;

/// `H = -Σ p_i log2 p_i` over the given category counts, in bits.
pub fn shannon_entropy(counts: &[u64]) -> Result<f64, DynamicsError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(DynamicsError::EmptyCounts);
    }
    let n = total as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Entropy of a ±1 vote stream over the two categories (up, down).
pub fn vote_entropy(votes: &[i64]) -> Result<f64, DynamicsError> {
    let up = votes.iter().filter(|&&v| v > 0).count() as u64;
    shannon_entropy(&[up, votes.len() as u64 - up])
}

/// Ordered ±1 votes on one story.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteSeries(Vec<i64>);

impl VoteSeries {
    pub fn new(values: Vec<i64>) -> Result<Self, DynamicsError> {
        if let Some(&bad) = values.iter().find(|&&v| v != 1 && v != -1) {
            return Err(DynamicsError::BadVote(bad));
        }
        Ok(VoteSeries(values))
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `s_t = (Σ_{i≤t} v_i) / t` for t = 1..=C.
    pub fn running_mean(&self) -> Vec<f64> {
        let mut sum = 0i64;
        self.0
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                sum += v;
                sum as f64 / (i + 1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LyapunovMethod {
    JacobianProduct,
    SeriesDivergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovEstimate {
    /// Exponents in nats per unit time.
    pub exponents: Vec<f64>,
    pub method: LyapunovMethod,
}

impl LyapunovEstimate {
    pub fn max(&self) -> f64 {
        self.exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumParams {
    /// Entropy threshold in bits.
    pub tau: f64,
    /// Minimum number of votes before a story may settle.
    pub c_min: usize,
}

impl Default for EquilibriumParams {
    fn default() -> Self {
        EquilibriumParams { tau: 0.9, c_min: 10 }
    }
}

impl EquilibriumParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(DynamicsError::BadParams("tau must lie in (0, 1]"));
        }
        if self.c_min < 1 {
            return Err(DynamicsError::BadParams("c_min must be at least 1"));
        }
        Ok(())
    }
}

/// Stable iff every exponent is negative, entropy is below `tau`, and at
/// least `c_min` votes were cast.
pub fn equilibrium(exponents: &LyapunovEstimate, entropy: f64, params: &EquilibriumParams, count: usize) -> bool {
    let mut stable = true;
    for &lambda in &exponents.exponents {
        if lambda >= 0.0 {
            stable = false;
            break;
        }
    }
    stable && entropy < params.tau && count >= params.c_min
}

/// Largest-exponent estimate on the running mean of a vote stream:
/// the mean over t of `ln(|δ_{t+1}| / |δ_t|)` with `δ_t = s_{t+1} - s_t`.
pub fn lyapunov_from_series(series: &VoteSeries) -> Result<LyapunovEstimate, DynamicsError> {
    if series.len() < 4 {
        return Err(DynamicsError::TooShort(series.len()));
    }
    let means = series.running_mean();
    let deltas: Vec<f64> = means
        .windows(2)
        .map(|w| {
            let d = (w[1] - w[0]).abs();
            if d == 0.0 {
                SERIES_EPSILON
            } else {
                d
            }
        })
        .collect();
    let ratios = deltas.windows(2).map(|w| (w[1] / w[0]).ln());
    let n = deltas.len() - 1;
    let lambda = ratios.sum::<f64>() / n as f64;
    Ok(LyapunovEstimate { exponents: vec![lambda], method: LyapunovMethod::SeriesDivergence })
}

/// Small dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        Matrix { n, data: rows.iter().flatten().copied().collect() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Householder QR: returns `(Q, R)` with `self = Q R`.
    pub fn qr(&self) -> (Matrix, Matrix) {
        let n = self.n;
        let mut r = self.clone();
        let mut q = Matrix::identity(n);
        for k in 0..n.saturating_sub(1) {
            let norm = (k..n).map(|i| r[(i, k)].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (0..n).map(|i| if i < k { 0.0 } else { r[(i, k)] }).collect();
            v[k] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            // R <- (I - 2vv'/v'v) R ; Q <- Q (I - 2vv'/v'v)
            for j in 0..n {
                let dot: f64 = (k..n).map(|i| v[i] * r[(i, j)]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..n {
                    r[(i, j)] -= f * v[i];
                }
            }
            for i in 0..n {
                let dot: f64 = (k..n).map(|j| q[(i, j)] * v[j]).sum();
                let f = 2.0 * dot / vnorm2;
                for j in k..n {
                    q[(i, j)] -= f * v[j];
                }
            }
        }
        (q, r)
    }

    /// Real parts of the eigenvalues by unshifted QR iteration (at most
    /// `sweeps` iterations, stopping once the strict lower triangle falls
    /// below `tol`). Complex pairs are not resolved.
    pub fn eigenvalues_qr(&self, sweeps: usize, tol: f64) -> Vec<f64> {
        let mut a = self.clone();
        for _ in 0..sweeps {
            let (q, r) = a.qr();
            a = r.mul(&q);
            let lower: f64 = (0..self.n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|ij| a[ij].abs()).sum();
            if lower < tol {
                break;
            }
        }
        (0..self.n).map(|i| a[(i, i)]).collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// A discrete-time system `x_{t+Δt} = F(x_t, t)` with Jacobian `∂F/∂x`.
pub trait DynamicalSystem {
    fn dim(&self) -> usize;
    fn step_size(&self) -> f64;
    fn advance(&self, x: &[f64], t: f64) -> Vec<f64>;
    fn jacobian(&self, x: &[f64], t: f64) -> Matrix;
}

/// Euler discretization of a vector field `dx/dt = G(x, t)`. Its one-step
/// Jacobian is `I + (∂G/∂x) Δt`, so propagating tangent vectors through it is
/// exactly `V_{t+Δt} = V_t + (∂G/∂x) V_t Δt`.
pub struct EulerFlow<G, J> {
    pub dim: usize,
    pub dt: f64,
    pub field: G,
    pub field_jacobian: J,
}

impl<G, J> DynamicalSystem for EulerFlow<G, J>
where
    G: Fn(&[f64], f64) -> Vec<f64>,
    J: Fn(&[f64], f64) -> Matrix,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn step_size(&self) -> f64 {
        self.dt
    }

    fn advance(&self, x: &[f64], t: f64) -> Vec<f64> {
        let g = (self.field)(x, t);
        x.iter().zip(g).map(|(xi, gi)| xi + gi * self.dt).collect()
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Matrix {
        let mut j = (self.field_jacobian)(x, t);
        for i in 0..self.dim {
            for k in 0..self.dim {
                j[(i, k)] *= self.dt;
            }
            j[(i, i)] += 1.0;
        }
        j
    }
}

/// A map given by closures, with unit or custom step size.
pub struct MapSystem<F, J> {
    pub dim: usize,
    pub dt: f64,
    pub map: F,
    pub map_jacobian: J,
}

impl<F, J> DynamicalSystem for MapSystem<F, J>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
    J: Fn(&[f64], f64) -> Matrix,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn step_size(&self) -> f64 {
        self.dt
    }

    fn advance(&self, x: &[f64], t: f64) -> Vec<f64> {
        (self.map)(x, t)
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Matrix {
        (self.map_jacobian)(x, t)
    }
}

fn horizon_steps<S: DynamicalSystem>(system: &S, t0: f64, t1: f64) -> Result<usize, DynamicsError> {
    let dt = system.step_size();
    if !(t1 > t0) || !(dt > 0.0) {
        return Err(DynamicsError::BadHorizon);
    }
    let d = system.dim();
    if d == 0 || d > MAX_STATE_DIM {
        return Err(DynamicsError::BadDimension(d));
    }
    Ok(((t1 - t0) / dt).round().max(1.0) as usize)
}

/// Lyapunov spectrum by propagating tangent vectors from `V = I` along the
/// trajectory from `x0`, re-orthonormalizing with QR every
/// [`REORTHONORMALIZE_EVERY`] steps and accumulating `ln |R_ii|`. Each
/// exponent is the accumulated log growth divided by `t1 - t0`.
pub fn lyapunov_from_jacobians<S: DynamicalSystem>(
    system: &S,
    x0: &[f64],
    t0: f64,
    t1: f64,
) -> Result<LyapunovEstimate, DynamicsError> {
    let steps = horizon_steps(system, t0, t1)?;
    let d = system.dim();
    let dt = system.step_size();
    let mut x = x0.to_vec();
    let mut v = Matrix::identity(d);
    let mut log_growth = vec![0.0; d];
    let mut since_qr = 0;
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let jac = system.jacobian(&x, t);
        v = jac.mul(&v);
        x = system.advance(&x, t);
        since_qr += 1;
        if !v.is_finite() || x.iter().any(|xi| !xi.is_finite()) {
            return Err(DynamicsError::NumericalOverflow(k));
        }
        if since_qr == REORTHONORMALIZE_EVERY || k + 1 == steps {
            let (q, r) = v.qr();
            for (i, acc) in log_growth.iter_mut().enumerate() {
                *acc += r[(i, i)].abs().ln();
            }
            v = q;
            since_qr = 0;
        }
    }
    let span = steps as f64 * dt;
    let exponents: Vec<f64> = log_growth.iter().map(|g| g / span).collect();
    if exponents.iter().any(|e| e.is_nan()) {
        return Err(DynamicsError::NumericalOverflow(steps));
    }
    Ok(LyapunovEstimate { exponents, method: LyapunovMethod::JacobianProduct })
}

/// The raw product `V_{t1}` of one-step Jacobians (no re-orthonormalization)
/// and its eigenvalues, for diagnostics. Only meaningful over short horizons.
pub fn jacobian_product_eigenvalues<S: DynamicalSystem>(
    system: &S,
    x0: &[f64],
    t0: f64,
    t1: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let steps = horizon_steps(system, t0, t1)?;
    let dt = system.step_size();
    let mut x = x0.to_vec();
    let mut v = Matrix::identity(system.dim());
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        v = system.jacobian(&x, t).mul(&v);
        x = system.advance(&x, t);
        if !v.is_finite() {
            return Err(DynamicsError::NumericalOverflow(k));
        }
    }
    Ok(v.eigenvalues_qr(50, 1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(exps: &[f64]) -> LyapunovEstimate {
        LyapunovEstimate { exponents: exps.to_vec(), method: LyapunovMethod::SeriesDivergence }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[4, 0]).unwrap(), 0.0);
        assert_eq!(shannon_entropy(&[5, 5]).unwrap(), 1.0);
        let expected = -0.8 * 0.8f64.log2() - 0.2 * 0.2f64.log2();
        assert!((shannon_entropy(&[8, 2]).unwrap() - expected).abs() < 1e-15);
        assert_eq!(shannon_entropy(&[0, 0]).unwrap_err(), DynamicsError::EmptyCounts);
        assert_eq!(shannon_entropy(&[]).unwrap_err(), DynamicsError::EmptyCounts);
    }

    #[test]
    fn vote_entropy_counts_two_directions() {
        assert_eq!(vote_entropy(&[1, -1, 1, -1]).unwrap(), 1.0);
        assert_eq!(vote_entropy(&[-1, -1]).unwrap(), 0.0);
    }

    #[test]
    fn equilibrium_examples() {
        let p = EquilibriumParams { tau: 0.9, c_min: 10 };
        assert!(equilibrium(&est(&[-0.1]), 0.3, &p, 50));
        assert!(!equilibrium(&est(&[0.2, -0.5]), 0.0, &p, 50));
        assert!(!equilibrium(&est(&[-1.0]), 0.0, &p, 5));
        assert!(!equilibrium(&est(&[0.0]), 0.0, &p, 50));
        assert!(!equilibrium(&est(&[-1.0]), 0.9, &p, 50));
        assert!(equilibrium(&est(&[]), 0.0, &p, 10));
    }

    #[test]
    fn params_validation() {
        assert!(EquilibriumParams::default().validate().is_ok());
        assert!(EquilibriumParams { tau: 0.0, c_min: 10 }.validate().is_err());
        assert!(EquilibriumParams { tau: 0.5, c_min: 0 }.validate().is_err());
    }

    #[test]
    fn series_constant_votes_give_zero() {
        let s = VoteSeries::new(vec![1; 20]).unwrap();
        assert!(lyapunov_from_series(&s).unwrap().exponents[0].abs() < 1e-9);
    }

    #[test]
    fn series_too_short() {
        let s = VoteSeries::new(vec![1, -1, 1]).unwrap();
        assert_eq!(lyapunov_from_series(&s).unwrap_err(), DynamicsError::TooShort(3));
        assert!(VoteSeries::new(vec![1, 0]).is_err());
    }

    #[test]
    fn qr_reconstructs() {
        let m = Matrix::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.3, 4.0, 1.0], vec![-1.0, 0.2, 3.0]]);
        let (q, r) = m.qr();
        let back = q.mul(&r);
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[(i, j)] - m[(i, j)]).abs() < 1e-12);
                if i > j {
                    assert!(r[(i, j)].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eigenvalues_of_triangular_and_symmetric() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut e = m.eigenvalues_qr(50, 1e-12);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-9 && (e[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn bad_horizon() {
        let sys = MapSystem {
            dim: 1,
            dt: 1.0,
            map: |x: &[f64], _| vec![x[0]],
            map_jacobian: |_: &[f64], _| Matrix::identity(1),
        };
        assert_eq!(lyapunov_from_jacobians(&sys, &[1.0], 5.0, 5.0).unwrap_err(), DynamicsError::BadHorizon);
    }

    #[test]
    fn divergent_trajectory_overflows() {
        let sys = MapSystem {
            dim: 1,
            dt: 1.0,
            map: |x: &[f64], _| vec![x[0] * x[0]],
            map_jacobian: |x: &[f64], _| Matrix::from_rows(&[vec![2.0 * x[0]]]),
        };
        assert!(matches!(lyapunov_from_jacobians(&sys, &[10.0], 0.0, 100.0), Err(DynamicsError::NumericalOverflow(_))));
    }

    #[test]
    fn euler_flow_matches_tangent_recursion() {
        // dx/dt = -x, Δt = 0.01: one-step factor 0.99, exponent ln(0.99)/0.01.
        let flow = EulerFlow {
            dim: 1,
            dt: 0.01,
            field: |x: &[f64], _| vec![-x[0]],
            field_jacobian: |_: &[f64], _| Matrix::from_rows(&[vec![-1.0]]),
        };
        let l = lyapunov_from_jacobians(&flow, &[1.0], 0.0, 10.0).unwrap();
        assert!((l.exponents[0] - 0.99f64.ln() / 0.01).abs() < 1e-9);
    }
}
