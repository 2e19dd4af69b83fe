//! Hypothesis tests and distribution comparisons over class counts.
//!
//! The chi-squared tail is computed from the regularized upper incomplete
//! gamma function, Q(df/2, x/2), using a series expansion below `a + 1` and
//! a Lentz continued fraction above it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ClassificationResult;
use crate::schema::ClassSchema;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SMOOTHING: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no discordant pairs: the test is undefined")]
    NoDiscordantPairs,
    #[error("test has zero degrees of freedom")]
    DegenerateTest,
    #[error("label lists differ")]
    LabelMismatch,
    #[error("q has zero mass on {0:?} where p does not; use smoothing")]
    UnsmoothedZero(String),
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub labels: Vec<String>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ClassDistribution {
    pub fn new(labels: Vec<String>, counts: Vec<u64>) -> Result<Self, StatsError> {
        if labels.len() != counts.len() {
            return Err(StatsError::InvalidArgument(format!(
                "{} labels but {} counts",
                labels.len(),
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(Self { labels, counts, total })
    }

    /// Convenience constructor with labels `c0, c1, …`.
    pub fn from_counts(counts: &[u64]) -> Self {
        let labels = (0..counts.len()).map(|i| format!("c{i}")).collect();
        Self::new(labels, counts.to_vec()).expect("lengths match")
    }

    pub fn count(&self, label: &str) -> Option<u64> {
        self.labels.iter().position(|l| l == label).map(|i| self.counts[i])
    }

    /// Proportions after adding `smoothing` to every count.
    pub fn proportions(&self, smoothing: f64) -> Vec<f64> {
        let denom = self.total as f64 + smoothing * self.counts.len() as f64;
        if denom == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| (c as f64 + smoothing) / denom).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TestResult {
    fn new(statistic: f64, df: u32, alpha: f64) -> Self {
        let p_value = chi2_tail(statistic, df);
        Self {
            statistic,
            df,
            p_value,
            alpha,
            significant: p_value < alpha,
            note: None,
        }
    }
}

/// Counts per parent class, in schema order, zero buckets included.
pub fn class_distribution(results: &[ClassificationResult], schema: &ClassSchema) -> ClassDistribution {
    let labels = schema.parent_names();
    let mut counts = vec![0u64; labels.len()];
    for r in results {
        if let Some(i) = labels.iter().position(|l| *l == r.parent) {
            counts[i] += 1;
        }
    }
    ClassDistribution::new(labels, counts).expect("lengths match")
}

/// Discordant cells of a paired outcome list: (A right & B wrong, A wrong & B right).
pub fn discordant_counts(paired: &[(bool, bool)]) -> (u64, u64) {
    paired.iter().fold((0, 0), |(b, c), &(a_ok, b_ok)| match (a_ok, b_ok) {
        (true, false) => (b + 1, c),
        (false, true) => (b, c + 1),
        _ => (b, c),
    })
}

/// McNemar's test on paired correctness flags, χ² = (b−c)²/(b+c).
/// With `corrected`, Edwards' continuity correction (|b−c|−1)²/(b+c) is
/// used instead.
pub fn mcnemar(paired: &[(bool, bool)], corrected: bool, alpha: f64) -> Result<TestResult, StatsError> {
    let (b, c) = discordant_counts(paired);
    mcnemar_counts(b, c, corrected, alpha)
}

pub fn mcnemar_counts(b: u64, c: u64, corrected: bool, alpha: f64) -> Result<TestResult, StatsError> {
    if b + c == 0 {
        return Err(StatsError::NoDiscordantPairs);
    }
    let diff = (b as f64 - c as f64).abs();
    let num = if corrected { (diff - 1.0).max(0.0) } else { diff };
    let mut result = TestResult::new(num * num / (b + c) as f64, 1, alpha);
    if corrected {
        result.note = Some("continuity corrected".into());
    }
    Ok(result)
}

/// Pearson homogeneity of two class-count vectors (a 2×k contingency
/// table). With equal sample sizes this is exactly Σ (A_i−B_i)²/(A_i+B_i);
/// unequal sizes get expected counts in proportion to each sample's total,
/// so two windows with the same shares score 0 whatever their sizes.
pub fn chi2_homogeneity(a: &ClassDistribution, b: &ClassDistribution, alpha: f64) -> Result<TestResult, StatsError> {
    if a.labels != b.labels {
        return Err(StatsError::LabelMismatch);
    }
    if a.total == 0 || b.total == 0 {
        return Err(StatsError::DegenerateTest);
    }
    let (n_a, n_b) = (a.total as f64, b.total as f64);
    let mut statistic = 0.0;
    let mut contributing = 0u32;
    for (&x, &y) in a.counts.iter().zip(&b.counts) {
        let sum = x + y;
        if sum == 0 {
            continue;
        }
        contributing += 1;
        if n_a == n_b {
            let d = x as f64 - y as f64;
            statistic += d * d / sum as f64;
        } else {
            // Pearson 2×k with margin-derived expectations, folded into a
            // single term per class so that swapping a and b is exact
            let d = x as f64 * n_b - y as f64 * n_a;
            statistic += d * d / (n_a * n_b * sum as f64);
        }
    }
    if contributing < 2 {
        return Err(StatsError::DegenerateTest);
    }
    let mut result = TestResult::new(statistic, contributing - 1, alpha);
    result.note = Some("samples treated as independent".into());
    Ok(result)
}

/// D_KL(p ‖ q) in nats, with `smoothing` added to every count first.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution, smoothing: f64) -> Result<f64, StatsError> {
    if p.labels != q.labels {
        return Err(StatsError::LabelMismatch);
    }
    if smoothing.is_nan() || smoothing < 0.0 {
        return Err(StatsError::InvalidArgument(format!("smoothing must be ≥ 0, got {smoothing}")));
    }
    if p.total == 0 && smoothing == 0.0 || q.total == 0 && smoothing == 0.0 {
        return Err(StatsError::EmptyDistribution);
    }
    let pp = p.proportions(smoothing);
    let qq = q.proportions(smoothing);
    for (i, (&pi, &qi)) in pp.iter().zip(&qq).enumerate() {
        if pi > 0.0 && qi == 0.0 {
            return Err(StatsError::UnsmoothedZero(p.labels[i].clone()));
        }
    }
    Ok(kl_probabilities(&pp, &qq))
}

/// D_KL over already normalized vectors; terms with p_i = 0 contribute 0.
pub fn kl_probabilities(p: &[f64], q: &[f64]) -> f64 {
    let d: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();
    d.max(0.0)
}

/// Cohen's kappa from paired categorical ratings. Defined as 1.0 when both
/// observed and chance agreement are perfect.
pub fn cohen_kappa<T: PartialEq + Clone>(pairs: &[(T, T)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut cats: Vec<T> = Vec::new();
    for (a, b) in pairs {
        for x in [a, b] {
            if !cats.contains(x) {
                cats.push(x.clone());
            }
        }
    }
    let n = pairs.len() as f64;
    let p_o = pairs.iter().filter(|(a, b)| a == b).count() as f64 / n;
    let p_e: f64 = cats
        .iter()
        .map(|c| {
            let a = pairs.iter().filter(|(x, _)| x == c).count() as f64 / n;
            let b = pairs.iter().filter(|(_, y)| y == c).count() as f64 / n;
            a * b
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Some(if (1.0 - p_o).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Some((p_o - p_e) / (1.0 - p_e))
}

/// P[X ≥ statistic] for X ~ χ²(df).
pub fn chi2_tail(statistic: f64, df: u32) -> f64 {
    if df == 0 {
        return if statistic > 0.0 { 0.0 } else { 1.0 };
    }
    if statistic.is_nan() || statistic <= 0.0 {
        return 1.0;
    }
    gamma_q(df as f64 / 2.0, statistic / 2.0).clamp(0.0, 1.0)
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
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
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const EPS: f64 = 1e-15;
const MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}
