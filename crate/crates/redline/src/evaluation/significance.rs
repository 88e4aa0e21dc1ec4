//! Paired and one-sample significance tests used to compare approach
//! results across seeds, plus the Welch test used by group analytics.
//!
//! One-sided tests use the alternative "first series is greater": small p
//! means `xs` systematically exceeds `ys` (or `mu0`). The Wilcoxon test is
//! exact (full sign-assignment distribution) up to n = 25 and switches to a
//! tie- and continuity-corrected normal approximation beyond.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::special::{normal_sf, t_cdf};

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("series lengths differ: {xs} vs {ys}")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("zero variance with nonzero effect; the statistic is undefined")]
    ZeroVariance,
    #[error("all paired differences are zero; the signed-rank test is undefined")]
    AllZeroDifferences,
}

/// A test statistic with its p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
fn variance(xs: &[f64], mean: f64) -> f64 {
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// One-sided paired t-test of `xs > ys`.
///
/// Identical series give statistic 0 and p = 0.5. A nonzero mean difference
/// with zero variance has no finite statistic and errors.
pub fn paired_t_one_sided(xs: &[f64], ys: &[f64]) -> Result<TestResult, StatError> {
    if xs.len() != ys.len() {
        return Err(StatError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    one_sample_t(&diffs, 0.0)
}

/// One-sided one-sample t-test of `mean(xs) > mu0`.
pub fn one_sample_t(xs: &[f64], mu0: f64) -> Result<TestResult, StatError> {
    if xs.len() < 2 {
        return Err(StatError::TooFewSamples {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let m = mean(xs);
    let var = variance(xs, m);
    if var == 0.0 {
        if m == mu0 {
            return Ok(TestResult {
                statistic: 0.0,
                p_value: 0.5,
            });
        }
        return Err(StatError::ZeroVariance);
    }
    let t = (m - mu0) / (var / n).sqrt();
    Ok(TestResult {
        statistic: t,
        p_value: 1.0 - t_cdf(t, n - 1.0),
    })
}

/// Two-sided Welch t-test for a difference in means of two independent
/// groups with unequal variances. Equal-mean degenerate inputs (both
/// variances zero) give p = 1.
pub fn welch_t_two_sided(xs: &[f64], ys: &[f64]) -> Result<TestResult, StatError> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(StatError::TooFewSamples {
            needed: 2,
            got: xs.len().min(ys.len()),
        });
    }
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (mx, my) = (mean(xs), mean(ys));
    let (vx, vy) = (variance(xs, mx), variance(ys, my));
    let se2 = vx / nx + vy / ny;
    if se2 == 0.0 {
        if mx == my {
            return Ok(TestResult {
                statistic: 0.0,
                p_value: 1.0,
            });
        }
        return Err(StatError::ZeroVariance);
    }
    let t = (mx - my) / se2.sqrt();
    // Welch-Satterthwaite degrees of freedom.
    let df = se2 * se2
        / ((vx / nx).powi(2) / (nx - 1.0) + (vy / ny).powi(2) / (ny - 1.0));
    Ok(TestResult {
        statistic: t,
        p_value: 2.0 * (1.0 - t_cdf(t.abs(), df)),
    })
}

/// Midranks of `values` sorted ascending: tied runs share the average of
/// the ranks they occupy (1-based).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) hold ranks i+1..=j+1.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Largest n for which the exact sign-assignment distribution is used.
pub const WILCOXON_EXACT_LIMIT: usize = 25;

/// One-sided Wilcoxon signed-rank test of `xs > ys`.
///
/// Zero differences are dropped; ties in |difference| get midranks. The
/// statistic is W+, the rank sum of positive differences; p is the null
/// probability of a rank sum at least as large.
pub fn wilcoxon_signed_rank_one_sided(xs: &[f64], ys: &[f64]) -> Result<TestResult, StatError> {
    if xs.len() != ys.len() {
        return Err(StatError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    let diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(StatError::AllZeroDifferences);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let p = if n <= WILCOXON_EXACT_LIMIT {
        // Midranks are multiples of 1/2, so doubled ranks are integers and
        // the rank-sum distribution can be counted exactly.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        // counts[s] = number of sign assignments whose doubled rank sum is s.
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let at_least: f64 = counts[w2..].iter().sum();
        at_least / (1u64 << n) as f64
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: each run of t tied |d| values removes
        // (t^3 - t) / 48 from the variance.
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        // Continuity correction toward the null mean.
        let z = (w_plus - mean - 0.5) / var.sqrt();
        normal_sf(z)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force Wilcoxon: enumerate all 2^n sign assignments.
    fn wilcoxon_oracle(xs: &[f64], ys: &[f64]) -> (f64, f64) {
        let diffs: Vec<f64> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| x - y)
            .filter(|d| *d != 0.0)
            .collect();
        let n = diffs.len();
        assert!(n <= 20, "oracle is exponential");
        let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let observed: f64 = diffs
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| r)
            .sum();
        let mut at_least = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if w >= observed - 1e-12 {
                at_least += 1;
            }
        }
        (observed, at_least as f64 / (1u64 << n) as f64)
    }

    #[test]
    fn identical_series_give_center_p() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let r = paired_t_one_sided(&xs, &xs).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.5);
    }

    #[test]
    fn constant_nonzero_differences_error_for_t() {
        let xs = [2.0, 3.0, 4.0];
        let ys = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_one_sided(&xs, &ys), Err(StatError::ZeroVariance));
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        // diffs = [1, 2, 3]: mean 2, sd 1, t = 2 / (1/sqrt(3)) = 2*sqrt(3).
        let xs = [2.0, 4.0, 6.0];
        let ys = [1.0, 2.0, 3.0];
        let r = paired_t_one_sided(&xs, &ys).unwrap();
        assert!((r.statistic - 2.0 * 3.0f64.sqrt()).abs() < 1e-12);
        assert!(r.p_value > 0.0 && r.p_value < 0.1);
    }

    #[test]
    fn one_sample_t_against_table() {
        // Mean 5.5, sd ~ known sample; cross-check a textbook-style case:
        // xs with mean m, testing mu0 where t lands on the 5% quantile.
        let xs = [5.1, 4.9, 5.3, 5.6, 4.8, 5.2, 5.0, 5.4];
        let m = xs.iter().sum::<f64>() / 8.0;
        let r = one_sample_t(&xs, m).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.5);

        let r = one_sample_t(&xs, 4.0).unwrap();
        assert!(r.statistic > 0.0 && r.p_value < 0.001);
        assert!(one_sample_t(&[1.0], 0.0).is_err());
    }

    #[test]
    fn welch_test_basics() {
        let a = [1.0, 1.0, 1.0];
        assert_eq!(welch_t_two_sided(&a, &a).unwrap().p_value, 1.0);
        let b = [2.0, 2.0, 2.0];
        assert_eq!(welch_t_two_sided(&a, &b), Err(StatError::ZeroVariance));

        // Clearly different groups: small p; sign follows the first group.
        let xs = [10.1, 10.3, 9.8, 10.2, 10.0];
        let ys = [8.0, 8.4, 7.9, 8.1, 8.2];
        let r = welch_t_two_sided(&xs, &ys).unwrap();
        assert!(r.statistic > 0.0);
        assert!(r.p_value < 0.001);
        let flipped = welch_t_two_sided(&ys, &xs).unwrap();
        assert!((flipped.p_value - r.p_value).abs() < 1e-12);
        assert_eq!(flipped.statistic, -r.statistic);
    }

    #[test]
    fn midranks_handle_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
        // Two tied at ranks 2 and 3 share 2.5.
        assert_eq!(midranks(&[1.0, 5.0, 5.0, 9.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(midranks(&[7.0, 7.0]), vec![1.5, 1.5]);
    }

    #[test]
    fn wilcoxon_all_positive_distinct_is_one_over_two_to_n() {
        let xs = [2.0, 4.0, 7.0, 11.0, 16.0];
        let ys = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank_one_sided(&xs, &ys).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_value - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_drops_zeros_and_errors_on_all_zero() {
        let xs = [1.0, 2.0, 3.0, 5.0];
        let ys = [1.0, 2.0, 1.0, 3.0];
        // Two zero diffs dropped; remaining diffs 2, 2 (tied, both positive).
        let r = wilcoxon_signed_rank_one_sided(&xs, &ys).unwrap();
        assert_eq!(r.statistic, 3.0);
        assert!((r.p_value - 0.25).abs() < 1e-15);

        assert_eq!(
            wilcoxon_signed_rank_one_sided(&xs, &xs),
            Err(StatError::AllZeroDifferences)
        );
    }

    #[test]
    fn wilcoxon_matches_exact_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..60 {
            let n = rng.gen_range(2..=12);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let ys: Vec<f64> = (0..n)
                .map(|i| {
                    if rng.gen::<f64>() < 0.3 {
                        xs[i] // force a zero diff
                    } else if rng.gen::<f64>() < 0.3 {
                        xs[i] - rng.gen_range(1..4) as f64 * 0.5 // force tied magnitudes
                    } else {
                        rng.gen_range(-5.0..5.0)
                    }
                })
                .collect();
            if xs.iter().zip(&ys).all(|(x, y)| x == y) {
                continue;
            }
            let r = wilcoxon_signed_rank_one_sided(&xs, &ys).unwrap();
            let (w_oracle, p_oracle) = wilcoxon_oracle(&xs, &ys);
            assert_eq!(r.statistic, w_oracle, "case {case}");
            assert!(
                (r.p_value - p_oracle).abs() < 1e-12,
                "case {case}: {} vs {}",
                r.p_value,
                p_oracle
            );
        }
    }

    #[test]
    fn wilcoxon_large_n_uses_normal_tail() {
        // n = 40 with a clear positive shift: p far below 0.5 and within
        // sane bounds.
        let xs: Vec<f64> = (0..40).map(|i| i as f64 + 1.5).collect();
        let ys: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank_one_sided(&xs, &ys).unwrap();
        assert!(r.p_value < 1e-6);
        let reversed = wilcoxon_signed_rank_one_sided(&ys, &xs).unwrap();
        assert!(reversed.p_value > 0.999);
    }

    proptest! {
        /// Inflating every paired difference by a positive constant never
        /// increases the one-sided p (t-test).
        #[test]
        fn t_p_monotone_under_shift(
            pairs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..20),
            shift in 0.01f64..2.0,
        ) {
            let xs: Vec<f64> = pairs.iter().map(|(x, _)| *x).collect();
            let ys: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
            let base = paired_t_one_sided(&xs, &ys);
            let lifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let shifted = paired_t_one_sided(&lifted, &ys);
            if let (Ok(a), Ok(b)) = (base, shifted) {
                prop_assert!(b.p_value <= a.p_value + 1e-12);
            }
        }

        /// The signed-rank test only sees magnitude ranks and signs, so
        /// scaling every pair by the same positive constant changes
        /// nothing. Doubling is exact in floating point, so equal
        /// magnitudes stay equal and the comparison can be exact.
        ///
        /// (Shift monotonicity, which the t-test above enjoys, is NOT a
        /// signed-rank theorem: a shift can reorder magnitude ranks and
        /// push probability mass across the observed statistic.)
        #[test]
        fn wilcoxon_p_invariant_under_positive_scaling(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..15);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-20..20) as f64 * 0.25).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-20..20) as f64 * 0.25).collect();
            let scaled_xs: Vec<f64> = xs.iter().map(|x| x * 2.0).collect();
            let scaled_ys: Vec<f64> = ys.iter().map(|y| y * 2.0).collect();
            let base = wilcoxon_signed_rank_one_sided(&xs, &ys);
            let scaled = wilcoxon_signed_rank_one_sided(&scaled_xs, &scaled_ys);
            match (base, scaled) {
                (Ok(a), Ok(b)) => {
                    // Ranks ignore scale entirely.
                    prop_assert_eq!(a.statistic, b.statistic);
                    prop_assert_eq!(a.p_value, b.p_value);
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "outcomes diverged: {:?} vs {:?}", a, b),
            }
        }

        /// Swapping the sample roles mirrors the statistic around the rank
        /// total and the two one-sided tails overlap in exactly the
        /// observed point mass, so they sum to at least 1.
        #[test]
        fn wilcoxon_tails_of_both_directions_cover_everything(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..15);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-20..20) as f64 * 0.5).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-20..20) as f64 * 0.5).collect();
            let forward = wilcoxon_signed_rank_one_sided(&xs, &ys);
            let backward = wilcoxon_signed_rank_one_sided(&ys, &xs);
            if let (Ok(a), Ok(b)) = (forward, backward) {
                prop_assert!(a.p_value + b.p_value >= 1.0 - 1e-12,
                    "tails sum to {}", a.p_value + b.p_value);
                prop_assert!(a.p_value + b.p_value <= 2.0);
            }
        }
    }
}
