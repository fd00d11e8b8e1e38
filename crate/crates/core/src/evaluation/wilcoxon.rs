//! Two-sided Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are dropped, tied magnitudes share their average rank.
//! For up to [`EXACT_MAX_N`] nonzero differences the p-value comes from the
//! exact permutation distribution of the positive-rank sum, conditional on the
//! observed tie pattern; above that a normal approximation with continuity and
//! tie corrections is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub n_effective: usize,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub p_value: f64,
    pub method: TestMethod,
    /// Set when every difference is zero; `p_value` is then 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Number of sign assignments whose doubled positive-rank sum equals each
/// index, for doubled integer ranks.
fn sign_sum_counts(doubled_ranks: &[u64]) -> Vec<u128> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    counts
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {v}")));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(PairedTestResult {
            n_effective: 0,
            statistic: 0.0,
            w_plus: 0.0,
            p_value: 1.0,
            method: TestMethod::Exact,
            degenerate: true,
        });
    }
    if n < MIN_PAIRS {
        return Err(Error::InvalidInput(format!(
            "{n} nonzero differences; at least {MIN_PAIRS} required"
        )));
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p_value, method) = if n <= EXACT_MAX_N {
        // Average ranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let counts = sign_sum_counts(&doubled);
        let denom = (1u128 << n) as f64;
        let w_small = (2.0 * statistic).round() as usize;
        let lower: u128 = counts[..=w_small].iter().sum();
        ((2.0 * lower as f64 / denom).min(1.0), TestMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        ((2.0 * normal_sf(z)).min(1.0), TestMethod::NormalApprox)
    };

    Ok(PairedTestResult {
        n_effective: n,
        statistic,
        w_plus,
        p_value,
        method,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.1, 0.5, 0.7, 0.2, 0.9];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn all_positive_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, TestMethod::Exact);
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 * 0.01 + 0.3).collect();
        let b: Vec<f64> = (0..40).map(|i| ((i * 7) % 40) as f64 * 0.01 + 0.3).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, TestMethod::NormalApprox);
        assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn too_few_pairs_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn normal_approximation_matches_reference_value() {
        // Differences 1..=30, all positive: z = (232.5 - 0.5) / sqrt(2363.75).
        let a: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let b = vec![0.0; 30];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let z: f64 = 232.0 / 2363.75f64.sqrt();
        let expected = libm::erfc(z / std::f64::consts::SQRT_2);
        assert!((r.p_value - expected).abs() < 1e-15);
    }
}
