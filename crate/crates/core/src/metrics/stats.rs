//! Pearson correlation and the router weight versus covariate analysis.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pearson {
    pub r: f64,
    /// Two-sided p-value from the t statistic with `n − 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Pearson> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::invalid(format!("pearson: {n} x values but {} y values", y.len())));
    }
    if n < 3 {
        return Err(Error::invalid(format!("pearson needs at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("pearson: non-finite input"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: constant input, correlation undefined"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        f64::MIN_POSITIVE
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).clamp(f64::MIN_POSITIVE, 1.0)
    };
    Ok(Pearson { r, p, n })
}

/// Centered moving average; windows shrink at the ends.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateAnalysis {
    pub pearson: Pearson,
    /// `(covariate, weight, rolling_mean)` sorted by covariate.
    pub rows: Vec<(f64, f64, f64)>,
}

impl CovariateAnalysis {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("covariate\tweight\trolling_mean\n");
        for (c, w, m) in &self.rows {
            out.push_str(&format!("{c}\t{w}\t{m}\n"));
        }
        out
    }
}

/// Correlates a projector's per-sample weight with a per-sample covariate.
pub fn weight_covariate_analysis(weights: &[f64], covariates: &[f64], window: usize) -> Result<CovariateAnalysis> {
    let pearson = pearson(covariates, weights)?;
    let mut pairs: Vec<(f64, f64)> = covariates.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rolling = rolling_mean(&sorted, window);
    let rows = pairs.iter().zip(rolling).map(|(&(c, w), m)| (c, w, m)).collect();
    Ok(CovariateAnalysis { pearson, rows })
}
