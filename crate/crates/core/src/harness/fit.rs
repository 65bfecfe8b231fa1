//! Order statistics and log-log scaling fits over run records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::records::RunRecord;

/// Linear-interpolated quantile of unsorted data, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Ordinary least squares `y = slope * x + intercept`, with R^2.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::DegenerateFit("need at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite coordinate".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateFit("all x values coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, intercept, r2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Per-x medians of `(x, y)` pairs, in increasing x.
pub fn medians_by_x(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for &(x, y) in points {
        // total order on f64 via the sign-adjusted bit pattern
        let key = {
            let b = x.to_bits();
            if b >> 63 == 1 { !b } else { b | (1 << 63) }
        };
        groups.entry(key).or_insert_with(|| (x, Vec::new())).1.push(y);
    }
    groups
        .into_values()
        .map(|(x, ys)| (x, median(&ys).expect("non-empty group")))
        .collect()
}

/// Least-squares line in log-log space through per-x medians.
pub fn fit_scaling_points(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let medians = medians_by_x(points);
    if medians.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need at least 3 distinct x values, got {}",
            medians.len()
        )));
    }
    if medians.iter().any(|(x, y)| *x <= 0.0 || *y <= 0.0) {
        return Err(Error::DegenerateFit("log-log fit needs positive medians".into()));
    }
    let xs: Vec<f64> = medians.iter().map(|(x, _)| x.ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|(_, y)| y.ln()).collect();
    let (slope, intercept, r2) = fit_line(&xs, &ys)?;
    Ok(ScalingFit { slope, intercept, r2 })
}

/// Log-log fit of `y_field` against `x_field` over run records.
pub fn fit_scaling(records: &[RunRecord], x_field: &str, y_field: &str) -> Result<ScalingFit> {
    let mut points = Vec::with_capacity(records.len());
    for r in records {
        let x = r
            .numeric(x_field)
            .ok_or_else(|| Error::DegenerateFit(format!("unknown numeric field {x_field}")))?;
        let y = r
            .numeric(y_field)
            .ok_or_else(|| Error::DegenerateFit(format!("unknown numeric field {y_field}")))?;
        points.push((x, y));
    }
    fit_scaling_points(&points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 4.0, 16.0, 64.0].iter().map(|&x: &f64| (x, x.powf(-0.5))).collect();
        let fit = fit_scaling_points(&pts).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);

        let pts: Vec<(f64, f64)> = [2.0, 3.0, 5.0].iter().map(|&x: &f64| (x, 7.0 * x * x)).collect();
        let fit = fit_scaling_points(&pts).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_scaling_points(&[(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)]).is_err());
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(fit_scaling_points(&[(1.0, 0.0), (2.0, 1.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(quantile(&[0.0, 10.0], 0.25), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
