//! Evaluation statistics: confusion metrics, ROC/AUC, Student-t confidence
//! intervals and ordinary least squares with t-tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::BehaviorType;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("confusion counts are empty")]
    EmptyCounts,
    #[error("ROC needs both classes present")]
    OneClassOnly,
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("labels must be -1 or +1, got {0}")]
    BadLabel(i64),
    #[error("non-finite input value")]
    NonFinite,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("design matrix is rank deficient")]
    Singular,
    #[error("underdetermined: {rows} rows for {cols} regressors")]
    Underdetermined { rows: usize, cols: usize },
    #[error("need at least {needed} runs, got {got}")]
    TooFewRuns { needed: usize, got: usize },
    #[error("confidence level must lie in (0, 1)")]
    BadLevel,
}

/// Confusion counts with "true story" (+1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Tallies `(predicted, actual)` label pairs in {-1, +1}.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (i64, i64)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, actual) in pairs {
            match (pred > 0, actual > 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when a precision or recall denominator was zero and the value defaulted to 0.
    pub degenerate: bool,
}

impl ClassificationMetrics {
    pub const NAMES: [&'static str; 4] = ["precision", "recall", "f1", "accuracy"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            "accuracy" => Some(self.accuracy),
            _ => None,
        }
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let degenerate = precision.is_none() || recall.is_none();
    let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ClassificationMetrics { precision, recall, f1, accuracy: (c.tp + c.tn) as f64 / c.total() as f64, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over the distinct score thresholds (higher score = more positive);
/// equal scores form a single step.
pub fn roc_auc(scores: &[f64], labels: &[i64]) -> Result<RocCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    if let Some(&l) = labels.iter().find(|l| **l != 1 && **l != -1) {
        return Err(MetricsError::BadLabel(l));
    }
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("non-empty");
        let (x1, y1) = (fp / neg, tp / pos);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc })
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const CF_TOLERANCE: f64 = 1e-10;
const CF_MAX_ITER: usize = 500;
const TINY: f64 = 1e-300;

/// Continued fraction for the incomplete beta function, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_TOLERANCE {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value `P(|T| > |t|)`.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// Inverse Student-t CDF for `p` in (0, 1), by bisection.
pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while student_t_cdf(lo, dof) > p {
        lo *= 2.0;
    }
    while student_t_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Sample mean and Student-t confidence half-width.
pub fn mean_ci(samples: &[f64], level: f64) -> Result<(f64, f64), MetricsError> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::BadLevel);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = student_t_quantile((1.0 + level) / 2.0, (n - 1) as f64);
    Ok((mean, t * (var / n as f64).sqrt()))
}

impl RocCurve {
    /// TPR at `fpr`, linear between vertices; on a vertical step the upper
    /// end is taken.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let i = self.points.partition_point(|p| p.0 <= fpr);
        if i == 0 {
            return self.points.first().map_or(0.0, |p| p.1);
        }
        let (x0, y0) = self.points[i - 1];
        match self.points.get(i) {
            Some(&(x1, y1)) if x0 < fpr => y0 + (y1 - y0) * (fpr - x0) / (x1 - x0),
            _ => y0,
        }
    }
}

/// Mean ROC across replicates with a Student-t band on a uniform FPR grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocBand {
    pub fpr: Vec<f64>,
    pub mean_tpr: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean_auc: f64,
    pub auc_half_width: f64,
}

pub fn roc_band(curves: &[RocCurve], grid_points: usize, level: f64) -> Result<RocBand, MetricsError> {
    if grid_points < 2 {
        return Err(MetricsError::TooFewSamples(grid_points));
    }
    let fpr: Vec<f64> = (0..grid_points).map(|i| i as f64 / (grid_points - 1) as f64).collect();
    let mut band = RocBand {
        fpr: fpr.clone(),
        mean_tpr: Vec::with_capacity(grid_points),
        lower: Vec::with_capacity(grid_points),
        upper: Vec::with_capacity(grid_points),
        mean_auc: 0.0,
        auc_half_width: 0.0,
    };
    for f in fpr {
        let tprs: Vec<f64> = curves.iter().map(|c| c.tpr_at(f)).collect();
        let (m, h) = mean_ci(&tprs, level)?;
        band.mean_tpr.push(m);
        band.lower.push((m - h).max(0.0));
        band.upper.push((m + h).min(1.0));
    }
    let aucs: Vec<f64> = curves.iter().map(|c| c.auc).collect();
    (band.mean_auc, band.auc_half_width) = mean_ci(&aucs, level)?;
    Ok(band)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub rss: f64,
    pub dof: usize,
    /// Set when the estimated condition number of XᵀX exceeds 1e12.
    pub ill_conditioned: bool,
}

impl OlsResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }
}

pub const CONDITION_WARNING: f64 = 1e12;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let k = a.len();
    let scale = (0..k).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= scale * 1e-14 || !d.is_finite() {
                    return Err(MetricsError::Singular);
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b`.
fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = l.len();
    let mut y = vec![0.0; k];
    for i in 0..k {
        y[i] = (b[i] - (0..i).map(|p| l[i][p] * y[p]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        x[i] = (y[i] - (i + 1..k).map(|p| l[p][i] * x[p]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Ordinary least squares. `x` holds one row per observation and must
/// include the intercept column if one is wanted; R² is computed against the
/// mean of `y`.
pub fn ols_fit(x: &[Vec<f64>], y: &[f64], names: &[&str]) -> Result<OlsResult, MetricsError> {
    let n = x.len();
    if n != y.len() {
        return Err(MetricsError::LengthMismatch(n, y.len()));
    }
    let k = x.first().map_or(0, Vec::len);
    if n <= k || k == 0 {
        return Err(MetricsError::Underdetermined { rows: n, cols: k });
    }
    if x.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) || y.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..k {
            xty[i] += row[i] * yi;
            for j in 0..=i {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            xtx[j][i] = xtx[i][j];
        }
    }
    let l = cholesky(&xtx)?;
    let diag: Vec<f64> = (0..k).map(|i| l[i][i] * l[i][i]).collect();
    let condition = diag.iter().cloned().fold(0.0, f64::max) / diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let ill_conditioned = condition > CONDITION_WARNING;
    if ill_conditioned {
        log::warn!("OLS design is ill-conditioned (estimated condition {condition:.3e})");
    }
    let beta = cholesky_solve(&l, &xty);

    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(row, yi)| {
            let fit: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            (yi - fit).powi(2)
        })
        .sum();
    let mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 0.0 };
    let dof = n - k;
    let sigma2 = rss / dof as f64;

    let mut std_errors = Vec::with_capacity(k);
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        let inv_col = cholesky_solve(&l, &e);
        std_errors.push((sigma2 * inv_col[i]).max(0.0).sqrt());
    }
    let t_stats: Vec<f64> = beta
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| {
            if *se > 0.0 {
                b / se
            } else if *b == 0.0 {
                0.0
            } else {
                b.signum() * f64::INFINITY
            }
        })
        .collect();
    let p_values = t_stats.iter().map(|t| student_t_two_sided_p(*t, dof as f64)).collect();
    let names = if names.len() == k {
        names.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("x{i}")).collect()
    };
    Ok(OlsResult { names, coefficients: beta, std_errors, t_stats, p_values, r_squared, rss, dof, ill_conditioned })
}

/// One sweep run: its population mix (percent) and resulting metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub percentages: BTreeMap<BehaviorType, f64>,
    pub metrics: ClassificationMetrics,
}

pub const ATTACK_REGRESSORS: [&str; 6] = ["intercept", "normal", "troll", "random", "traitor", "orchestrated"];
pub const MIN_SWEEP_RUNS: usize = 30;

/// Design row for a mix: intercept, normal, troll, random, traitor and the
/// combined orchestrated share. Targets are the omitted category.
pub fn attack_design_row(p: &BTreeMap<BehaviorType, f64>) -> Vec<f64> {
    let g = |t| p.get(&t).copied().unwrap_or(0.0);
    vec![
        1.0,
        g(BehaviorType::Normal),
        g(BehaviorType::Troll),
        g(BehaviorType::Random),
        g(BehaviorType::Traitor),
        g(BehaviorType::OrchSlander) + g(BehaviorType::OrchWhitewash),
    ]
}

/// Regresses each metric on the population mix.
pub fn attack_impact_regression(runs: &[RunMetrics]) -> Result<BTreeMap<String, OlsResult>, MetricsError> {
    if runs.len() < MIN_SWEEP_RUNS {
        return Err(MetricsError::TooFewRuns { needed: MIN_SWEEP_RUNS, got: runs.len() });
    }
    let x: Vec<Vec<f64>> = runs.iter().map(|r| attack_design_row(&r.percentages)).collect();
    let mut out = BTreeMap::new();
    for name in ClassificationMetrics::NAMES {
        let y: Vec<f64> = runs.iter().map(|r| r.metrics.get(name).expect("known metric")).collect();
        out.insert(name.to_string(), ols_fit(&x, &y, &ATTACK_REGRESSORS)?);
    }
    Ok(out)
}

/// Fixed-width text rendering of regression results, one block per metric.
pub fn format_ols_table(results: &BTreeMap<String, OlsResult>) -> String {
    let mut s = String::new();
    for name in ClassificationMetrics::NAMES {
        let Some(r) = results.get(name) else { continue };
        s.push_str(&format!("{name}  R^2 = {:.3}\n", r.r_squared));
        s.push_str(&format!("{:<14}{:>12}{:>12}{:>10}{:>9}\n", "type", "coef", "std err", "t", "P>|t|"));
        for i in 0..r.names.len() {
            s.push_str(&format!(
                "{:<14}{:>12.4e}{:>12.3e}{:>10.3}{:>9.3}\n",
                r.names[i], r.coefficients[i], r.std_errors[i], r.t_stats[i], r.p_values[i]
            ));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tpr_interpolates_and_takes_top_of_steps() {
        let c = RocCurve { points: vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (1.0, 1.0)], auc: 0.625 };
        assert_eq!(c.tpr_at(0.0), 0.5);
        assert_eq!(c.tpr_at(0.25), 0.5);
        assert!((c.tpr_at(0.75) - 0.75).abs() < 1e-12);
        assert_eq!(c.tpr_at(1.0), 1.0);
    }

    #[test]
    fn identical_curves_have_zero_width_band() {
        let c = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, -1, 1, -1]).unwrap();
        let band = roc_band(&[c.clone(), c.clone(), c.clone()], 11, 0.95).unwrap();
        assert_eq!(band.mean_auc, c.auc);
        assert_eq!(band.auc_half_width, 0.0);
        assert_eq!(band.lower, band.upper);
    }

    #[test]
    fn metrics_examples() {
        let m = classification_metrics(&ConfusionCounts { tp: 8, fp: 2, tn: 8, fn_: 2 }).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            assert!((v - 0.8).abs() < 1e-12);
        }
        let m = classification_metrics(&ConfusionCounts { tp: 3, fp: 0, tn: 4, fn_: 0 }).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let m = classification_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 4, fn_: 2 }).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate);
        assert_eq!(classification_metrics(&ConfusionCounts::default()), Err(MetricsError::EmptyCounts));
    }

    #[test]
    fn roc_extremes() {
        let labels = [1, 1, -1, -1];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.8], &labels).unwrap().auc, 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.5, 0.4], &[1, 1]), Err(MetricsError::OneClassOnly));
    }

    #[test]
    fn roc_ties_form_one_step() {
        let r = roc_auc(&[0.5, 0.5, 0.1], &[1, -1, -1]).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]);
        assert!((r.auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mean_ci_examples() {
        assert_eq!(mean_ci(&[1.0; 4], 0.95).unwrap(), (1.0, 0.0));
        let (m, h) = mean_ci(&[0.0, 2.0], 0.95).unwrap();
        assert_eq!(m, 1.0);
        assert!((h - 12.706).abs() < 1e-3, "half width {h}");
        assert_eq!(mean_ci(&[1.0], 0.95), Err(MetricsError::TooFewSamples(1)));
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10, "n = {n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_fit() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 + 1.0).collect();
        let r = ols_fit(&x, &y, &["intercept", "x"]).unwrap();
        assert!((r.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((r.coefficients[1] - 2.0).abs() < 1e-10);
        assert!(r.rss < 1e-18);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_only_fit_is_mean() {
        let y = [3.0, 5.0, 10.0, 2.0];
        let x = vec![vec![1.0]; 4];
        let r = ols_fit(&x, &y, &["intercept"]).unwrap();
        assert!((r.coefficients[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_is_singular() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0];
        assert_eq!(ols_fit(&x, &y, &[]), Err(MetricsError::Singular));
        assert!(matches!(ols_fit(&x[..3], &y[..3], &[]), Err(MetricsError::Underdetermined { .. })));
    }
}
