//! Small-sample statistics for comparing planners across seeds.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{HarnessError, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (denominator `n − 1`).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Two-sided Student-t interval for the mean of paired differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedInterval {
    pub mean: f64,
    pub std_err: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n: usize,
}

impl PairedInterval {
    /// The whole interval lies above zero.
    pub fn positive(&self) -> bool {
        self.lower > 0.0
    }
}

/// Interval for `mean(a − b)` at confidence `level`, pairing `a[i]` with `b[i]`.
pub fn paired_interval(a: &[f64], b: &[f64], level: f64) -> Result<PairedInterval> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(HarnessError::Config(format!(
            "paired interval needs two equal samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(HarnessError::Config(format!("confidence level {level} outside [0, 1)")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let m = mean(&d);
    let se = sample_sd(&d) / (n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.5 + level / 2.0);
    Ok(PairedInterval {
        mean: m,
        std_err: se,
        lower: m - t * se,
        upper: m + t * se,
        level,
        n,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n − 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(HarnessError::Config(format!(
            "spearman needs two equal samples of size ≥ 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let rho = pearson(&ranks(x), &ranks(y));
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = n as f64 - 2.0;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("degrees of freedom are positive");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Spearman { rho, p_value, n })
}
