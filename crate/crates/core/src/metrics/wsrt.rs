use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CtsError, Result};

/// Largest sample size evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 20;

/// Minimum number of non-zero differences.
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WsrtMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WsrtResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub method: WsrtMethod,
}

/// Non-zero differences ranked by magnitude with average ranks on ties,
/// returned doubled so they stay integral: `(2 * rank, positive)`.
fn doubled_ranks(a: &[f64], b: &[f64]) -> Result<Vec<(u64, bool)>> {
    if a.len() != b.len() {
        return Err(CtsError::data(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(CtsError::data("paired samples contain non-finite values"));
    }
    if d.len() < MIN_N {
        return Err(CtsError::InsufficientData(format!(
            "signed-rank test needs at least {} non-zero differences, got {}",
            MIN_N,
            d.len()
        )));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut out = Vec::with_capacity(d.len());
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean; doubled: i + j + 2.
        let r2 = (i + j + 2) as u64;
        for v in &d[i..=j] {
            out.push((r2, *v > 0.0));
        }
        i = j + 1;
    }
    Ok(out)
}

/// Two-sided p-value from the exact permutation distribution of the
/// doubled-rank sum, by dynamic programming over sign assignments.
fn exact_p(ranks: &[(u64, bool)]) -> f64 {
    let total: u64 = ranks.iter().map(|r| r.0).sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &(r, _) in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w2: u64 = ranks.iter().filter(|r| r.1).map(|r| r.0).sum();
    let all = 2f64.powi(ranks.len() as i32);
    let lower: u64 = counts[..=w2 as usize].iter().sum();
    let upper: u64 = counts[w2 as usize..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

fn normal_p(ranks: &[(u64, bool)]) -> f64 {
    let n = ranks.len() as f64;
    let w = ranks.iter().filter(|r| r.1).map(|r| r.0 as f64 / 2.0).sum::<f64>();
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranks.len() {
        let mut j = i;
        while j + 1 < ranks.len() && ranks[j + 1].0 == ranks[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - phi.cdf(z))).min(1.0)
}

fn run(a: &[f64], b: &[f64], method: Option<WsrtMethod>) -> Result<WsrtResult> {
    let ranks = doubled_ranks(a, b)?;
    let n = ranks.len();
    let method = method.unwrap_or(if n <= EXACT_MAX_N { WsrtMethod::Exact } else { WsrtMethod::Normal });
    if method == WsrtMethod::Exact && n > 62 {
        return Err(CtsError::usage(format!("exact signed-rank distribution limited to n <= 62, got {}", n)));
    }
    let p_value = match method {
        WsrtMethod::Exact => exact_p(&ranks),
        WsrtMethod::Normal => normal_p(&ranks),
    };
    let w_plus = ranks.iter().filter(|r| r.1).map(|r| r.0 as f64 / 2.0).sum();
    Ok(WsrtResult { n, w_plus, p_value, method })
}

/// Two-sided Wilcoxon signed-rank test on paired samples: exact for up to
/// [`EXACT_MAX_N`] non-zero differences, normal approximation (continuity
/// and tie corrected) above.
pub fn wsrt(a: &[f64], b: &[f64]) -> Result<WsrtResult> {
    run(a, b, None)
}

/// Signed-rank test with the exact null distribution regardless of `n`.
/// Limited to 62 non-zero differences (the counts are 64-bit).
pub fn wsrt_exact(a: &[f64], b: &[f64]) -> Result<WsrtResult> {
    run(a, b, Some(WsrtMethod::Exact))
}

pub fn wsrt_normal(a: &[f64], b: &[f64]) -> Result<WsrtResult> {
    run(a, b, Some(WsrtMethod::Normal))
}
