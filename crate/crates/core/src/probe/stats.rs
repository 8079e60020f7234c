//! Paired significance tests.
//!
//! The signed-rank test computes exact p-values by enumerating the sign-flip
//! distribution (dynamic program over rank sums) for n <= 20 and falls back
//! to the normal approximation beyond that. The paired t-test evaluates the
//! t distribution through the regularized incomplete beta function.

use crate::error::{CoreError, Result};

fn paired_diffs(a: &[f64], b: &[f64], context: &str) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::Batch(format!(
            "{context}: paired samples of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x - y).collect())
}

/// Midranks of |d|, doubled so ties land on integers. Zero differences are
/// dropped before calling.
fn doubled_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks2 = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // doubled average rank of the tie group [i, j]
        let rank2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            ranks2[idx] = rank2;
        }
        i = j + 1;
    }
    ranks2
}

/// Distribution of the doubled positive-rank sum under random sign flips:
/// counts[s] = number of sign assignments with W2 = s.
fn signflip_distribution(ranks2: &[u64]) -> Vec<u64> {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in ranks2 {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

enum Tail {
    TwoSided,
    Greater,
}

fn wilcoxon(a: &[f64], b: &[f64], tail: Tail) -> Result<f64> {
    let diffs: Vec<f64> = paired_diffs(a, b, "wilcoxon_signed_rank")?
        .into_iter()
        .filter(|&d| d != 0.0)
        .collect();
    if diffs.is_empty() {
        // no non-zero differences: no evidence either way
        return Ok(1.0);
    }
    let ranks2 = doubled_ranks(&diffs);
    let total: u64 = ranks2.iter().sum();
    let w2_pos: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    if diffs.len() <= 20 {
        let counts = signflip_distribution(&ranks2);
        let denom = (1u64 << diffs.len()) as f64;
        match tail {
            Tail::Greater => {
                let hits: u64 = counts[w2_pos as usize..].iter().sum();
                Ok(hits as f64 / denom)
            }
            Tail::TwoSided => {
                let t = w2_pos.min(total - w2_pos);
                let low: u64 = counts[..=t as usize].iter().sum();
                let high: u64 = counts[(total - t) as usize..].iter().sum();
                Ok(((low + high) as f64 / denom).min(1.0))
            }
        }
    } else {
        // normal approximation with tie-corrected variance on doubled ranks
        let n = diffs.len() as f64;
        let mean = total as f64 / 2.0;
        let sum_sq: f64 = ranks2.iter().map(|&r| (r * r) as f64).sum();
        let sd = (sum_sq / 4.0).sqrt();
        if sd == 0.0 {
            return Ok(1.0);
        }
        let _ = n;
        let z = (w2_pos as f64 - mean) / sd;
        let upper = 0.5 * erfc(z / std::f64::consts::SQRT_2);
        Ok(match tail {
            Tail::Greater => upper,
            Tail::TwoSided => (2.0 * upper.min(1.0 - upper)).min(1.0),
        })
    }
}

/// Exact two-sided signed-rank p-value (zero differences dropped, ties
/// midranked). Returns 1.0 when every difference is zero.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    wilcoxon(a, b, Tail::TwoSided)
}

/// One-sided variant: evidence that a > b.
pub fn wilcoxon_signed_rank_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    wilcoxon(a, b, Tail::Greater)
}

/// Two-sided paired t-test. Errors when the differences have zero variance.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    let diffs = paired_diffs(a, b, "paired_t_test")?;
    let n = diffs.len();
    if n < 2 {
        return Err(CoreError::Batch("paired_t_test: need at least 2 pairs".into()));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(CoreError::Degenerate(
            "paired_t_test: differences have zero variance".into(),
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    Ok(student_t_two_sided(t, df))
}

/// Two-sided p for a t statistic: I_{df/(df+t^2)}(df/2, 1/2).
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
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

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
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
        // odd step
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
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Complementary error function (Numerical-Recipes rational approximation,
/// |error| < 1.2e-7, sign-symmetric).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}
