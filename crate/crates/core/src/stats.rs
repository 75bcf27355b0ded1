//! Spearman rank correlation and a seeded one-sided permutation test.

use crate::error::{Error, Result};
use crate::numerics::SplitMix64;

/// Ascending ranks starting at 1; tied values share their average rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub ranks: Vec<f64>,
    pub has_ties: bool,
}

impl RankVector {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

pub fn rank(values: &[f64]) -> Result<RankVector> {
    if values.is_empty() {
        return Err(Error::config("cannot rank an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Runtime("cannot rank non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut ranks = vec![0.0; values.len()];
    let mut has_ties = false;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        has_ties |= end - start > 1;
        // Positions start..end hold 1-based ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(RankVector { ranks, has_ties })
}

/// Spearman's rho.
///
/// Without ties this is the closed form `1 - 6 Σd² / (n(n² - 1))`; with ties
/// it is the Pearson correlation of the average ranks, which the closed form
/// equals whenever it applies.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let rx = rank(x)?;
    let ry = rank(y)?;
    if rx.has_ties || ry.has_ties {
        pearson(&rx.ranks, &ry.ranks)
    } else {
        let n = x.len() as f64;
        let d2: f64 = rx
            .ranks
            .iter()
            .zip(&ry.ranks)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "spearman_rho",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 observations, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("a variable has zero rank variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// One-sided permutation p-value for a positive rank correlation.
///
/// `p = (1 + #{perm: rho_perm >= rho_obs}) / (1 + n_perm)`, where each
/// permutation shuffles the ranks of `y` with a stream derived from
/// `(seed, permutation index)`.
pub fn permutation_pvalue(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() < 3 {
        return Err(Error::config("permutation test needs n >= 3"));
    }
    if n_perm < 100 {
        return Err(Error::config("permutation test needs n_perm >= 100"));
    }
    let rx = rank(x)?.ranks;
    let ry = rank(y)?.ranks;
    let observed = pearson(&rx, &ry)?;
    // Guards against counting permutations that differ only by rounding.
    let threshold = observed - 1e-12;
    let mut shuffled = ry.clone();
    let mut at_least = 0usize;
    for p in 0..n_perm {
        shuffled.copy_from_slice(&ry);
        SplitMix64::derive(seed, p as u64).shuffle(&mut shuffled);
        if pearson(&rx, &shuffled)? >= threshold {
            at_least += 1;
        }
    }
    Ok((1 + at_least) as f64 / (1 + n_perm) as f64)
}
