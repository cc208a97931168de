//! Rank correlation and chi-square tests used for trend and sampler checks.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation.
    pub p_value: f64,
    pub n: usize,
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation of paired samples.
pub fn spearman(x: &[f64], y: &[f64]) -> Spearman {
    assert_eq!(x.len(), y.len(), "paired samples");
    let n = x.len();
    let rho = if n < 2 {
        0.0
    } else {
        pearson(&ranks(x), &ranks(y))
    };
    let p_value = if n < 3 {
        1.0
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Spearman { rho, p_value, n }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_p(statistic: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("dof > 0");
    1.0 - dist.cdf(statistic)
}

/// Goodness of fit of observed counts against a uniform distribution.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquare {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = counts.len().saturating_sub(1);
    ChiSquare {
        statistic,
        dof,
        p_value: chi_p(statistic, dof),
    }
}

/// Two-sample homogeneity test on histograms over the same bins.
///
/// Bins empty in both samples are skipped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> ChiSquare {
    assert_eq!(a.len(), b.len(), "same bins");
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let n = (na + nb) as f64;
    let mut statistic = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        bins += 1;
        let ea = col * na as f64 / n;
        let eb = col * nb as f64 / n;
        statistic += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    let dof = bins.saturating_sub(1);
    ChiSquare {
        statistic,
        dof,
        p_value: chi_p(statistic, dof),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_monotone() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let s = spearman(&x, &y);
        assert_eq!(s.rho, 1.0);
        assert_eq!(s.p_value, 0.0);
        let yr: Vec<f64> = y.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &yr).rho, -1.0);
    }

    #[test]
    fn spearman_p_value_reference() {
        // scipy.stats.spearmanr: rho = 0.748252, p = 0.005124
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let y = [2.0, 0.0, 5.0, 1.0, 3.0, 9.0, 4.0, 11.0, 6.0, 7.0, 10.0, 8.0];
        let s = spearman(&x, &y);
        assert!((s.rho - 0.748_251_748).abs() < 1e-8);
        assert!((s.p_value - 0.005_124_08).abs() < 1e-6, "{}", s.p_value);
    }

    #[test]
    fn chi_square_reference() {
        // counts [18, 22, 20, 40]: expected 25, statistic = (49 + 9 + 25 + 225) / 25 = 12.32
        let c = chi_square_uniform(&[18, 22, 20, 40]);
        assert!((c.statistic - 12.32).abs() < 1e-12);
        assert_eq!(c.dof, 3);
        // scipy.stats.chi2.sf(12.32, 3) = 0.0063636
        assert!((c.p_value - 0.006_363_63).abs() < 1e-7, "{}", c.p_value);
        let same = chi_square_two_sample(&[10, 20, 30], &[10, 20, 30]);
        assert_eq!(same.statistic, 0.0);
    }
}
