use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};
use crate::sweep::{read_records, SweepRecord};

/// Numeric columns of a sweep CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    LossValue,
    L2MuError,
    FinalObjective,
}

impl Column {
    pub fn parse(s: &str) -> Result<Column> {
        match s {
            "loss_value" => Ok(Column::LossValue),
            "l2_mu_error" => Ok(Column::L2MuError),
            "final_objective" => Ok(Column::FinalObjective),
            _ => Err(CliError::Usage(format!(
                "unknown column `{s}` (expected loss_value, l2_mu_error or final_objective)"
            ))),
        }
    }

    pub fn get(&self, r: &SweepRecord) -> f64 {
        match self {
            Column::LossValue => r.loss_value,
            Column::L2MuError => r.l2_mu_error,
            Column::FinalObjective => r.final_objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    /// `(n, median)` pairs the line was fitted to.
    pub points: Vec<(usize, f64)>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Successful values of `column` grouped by `n`, each group sorted.
pub fn grouped(records: &[SweepRecord], column: Column) -> BTreeMap<usize, Vec<f64>> {
    let mut g: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        let v = column.get(r);
        if v.is_finite() {
            g.entry(r.n).or_default().push(v);
        }
    }
    for v in g.values_mut() {
        v.sort_by(f64::total_cmp);
    }
    g
}

pub fn medians(records: &[SweepRecord], column: Column) -> Vec<(usize, f64)> {
    grouped(records, column)
        .into_iter()
        .map(|(n, v)| (n, quantile(&v, 0.5)))
        .collect()
}

/// Ordinary least squares of `log(median)` on `log n`.
pub fn fit_rate_records(records: &[SweepRecord], column: Column) -> Result<RateFit> {
    fit_log_log(&medians(records, column))
}

pub fn fit_log_log(points: &[(usize, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(CliError::Usage(format!(
            "rate fitting needs at least 3 distinct n, got {}",
            points.len()
        )));
    }
    if let Some((n, m)) = points.iter().find(|(_, m)| *m <= 0.0) {
        return Err(CliError::Degenerate(format!("median {m} at n={n}; recovery is exact")));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, m)| m.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (sse / (k - 2.0) / sxx).sqrt();
    Ok(RateFit {
        slope,
        stderr,
        intercept,
        points: points.to_vec(),
    })
}

pub fn fit_rate(path: &Path, column: Column) -> Result<RateFit> {
    fit_rate_records(&read_records(path)?, column)
}

pub const PLOT_HEADER: &str = "n,count,min,q10,q25,median,q75,q90,max";

/// Per-n quantile table of `column`.
pub fn plotdata(records: &[SweepRecord], column: Column) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for (n, v) in grouped(records, column) {
        let q: Vec<String> = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
            .iter()
            .map(|&p| format!("{:?}", quantile(&v, p)))
            .collect();
        s.push_str(&format!("{n},{},{}\n", v.len(), q.join(",")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize, trial: usize, v: f64) -> SweepRecord {
        SweepRecord {
            n,
            trial,
            seed: 0,
            family: "linear_shared".into(),
            loss_name: "D2".into(),
            loss_value: v,
            l2_mu_error: v,
            final_objective: v,
            wall_ms: 0,
            status: "ok".into(),
        }
    }

    const GRID: [usize; 6] = [250, 500, 1000, 2000, 4000, 8000];

    #[test]
    fn exact_power_law() {
        let rs: Vec<_> = GRID.iter().map(|&n| rec(n, 0, (n as f64).powf(-0.5))).collect();
        let f = fit_rate_records(&rs, Column::LossValue).unwrap();
        assert!((f.slope + 0.5).abs() <= 1e-12);
        assert!(f.stderr <= 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_slope() {
        let rs: Vec<_> = GRID.iter().map(|&n| rec(n, 0, 0.3)).collect();
        assert!(fit_rate_records(&rs, Column::L2MuError).unwrap().slope.abs() <= 1e-12);
    }

    #[test]
    fn sqrt_log_n_over_n_slope() {
        let rs: Vec<_> = GRID
            .iter()
            .map(|&n| rec(n, 0, ((n as f64).ln() / n as f64).sqrt()))
            .collect();
        let s = fit_rate_records(&rs, Column::LossValue).unwrap().slope;
        // Reference value from a separate numpy polyfit on the same grid.
        assert!((s + 0.429_981_44).abs() < 1e-6, "{s}");
    }

    #[test]
    fn invariant_to_order_and_duplicates() {
        let mut rs = Vec::new();
        for &n in &GRID[..4] {
            for t in 0..5 {
                rs.push(rec(n, t, (t as f64 + 1.0) / n as f64));
            }
        }
        let a = fit_rate_records(&rs, Column::LossValue).unwrap();
        rs.reverse();
        let dup: Vec<_> = rs.iter().chain(rs.iter()).cloned().collect();
        assert_eq!(fit_rate_records(&rs, Column::LossValue).unwrap().slope, a.slope);
        assert_eq!(fit_rate_records(&dup, Column::LossValue).unwrap().slope, a.slope);
    }

    #[test]
    fn degenerate_and_too_few() {
        let rs: Vec<_> = GRID.iter().map(|&n| rec(n, 0, 0.0)).collect();
        assert!(matches!(fit_rate_records(&rs, Column::LossValue), Err(CliError::Degenerate(_))));
        let rs: Vec<_> = GRID[..2].iter().map(|&n| rec(n, 0, 1.0)).collect();
        assert!(matches!(fit_rate_records(&rs, Column::LossValue), Err(CliError::Usage(_))));
    }

    #[test]
    fn failed_rows_are_ignored() {
        let mut rs: Vec<_> = GRID.iter().map(|&n| rec(n, 0, 1.0 / n as f64)).collect();
        let mut bad = rec(250, 1, f64::NAN);
        bad.status = "failed".into();
        rs.push(bad);
        assert!((fit_rate_records(&rs, Column::LossValue).unwrap().slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn plot_table() {
        let rs: Vec<_> = (0..5).map(|t| rec(100, t, t as f64)).collect();
        let table = plotdata(&rs, Column::LossValue);
        assert_eq!(table, format!("{PLOT_HEADER}\n100,5,0.0,0.4,1.0,2.0,3.0,3.6,4.0\n"));
    }
}
