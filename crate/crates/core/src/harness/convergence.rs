//! Convergence studies in the time step.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ProblemConfig;
use crate::harness::export::{format_csv_float, write_csv_rows};
use crate::model::build_grids;
use crate::scheme::Retention;

/// Errors below this level are treated as exact and left out of the fit.
pub const ERROR_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "y0", rename_all = "snake_case")]
pub enum Reference {
    ClosedForm(Vec<f64>),
    /// The largest `n` of the study, excluded from the fit.
    FinestGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    pub h_reflection: f64,
    pub kappa: usize,
    pub y0: Option<Vec<f64>>,
    /// Euclidean distance to the reference `Y_0`.
    pub error: Option<f64>,
    /// Euclidean norm of the per-component standard errors of `Y_0`.
    pub stderr: Option<f64>,
    /// `log(2T / h)`.
    pub alpha: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub components: usize,
    pub gamma: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares fit of `log error` on `log h`.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

impl ConvergenceTable {
    pub fn csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let d = self.components;
        let mut header: Vec<String> = ["n", "h", "hR", "kappa"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=d).map(|j| format!("y0_{j}")));
        header.extend(["error", "stderr", "alpha", "seconds"].iter().map(|s| s.to_string()));
        let opt = |v: Option<f64>| v.map(format_csv_float).unwrap_or_else(|| "NA".into());
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut out = vec![
                    r.n.to_string(),
                    format_csv_float(r.h),
                    format_csv_float(r.h_reflection),
                    r.kappa.to_string(),
                ];
                match &r.y0 {
                    Some(y) => out.extend(y.iter().map(|&v| format_csv_float(v))),
                    None => out.extend((0..d).map(|_| "NA".to_string())),
                }
                out.push(opt(r.error));
                out.push(opt(r.stderr));
                out.push(format_csv_float(r.alpha));
                out.push(format_csv_float(r.seconds));
                out
            })
            .collect();
        (header, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (header, rows) = self.csv();
        write_csv_rows(path, &header, &rows)
    }
}

/// Least-squares slope and intercept of `log error` against `log h` over
/// rows with an error above [`ERROR_FLOOR`]; `None` with fewer than two.
pub fn fit_slope(rows: &[ConvergenceRow]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.error.filter(|&e| e > ERROR_FLOOR && e.is_finite()).map(|e| (r.h.ln(), e.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Solves `config` for every `n` in `n_list` with `|R| ~ |pi|^gamma`,
/// sharing the seed across rows so paths share their leading normals.
pub fn run_convergence(
    config: &ProblemConfig,
    n_list: &[usize],
    gamma: f64,
    reference: &Reference,
    seed: Option<u64>,
) -> Result<ConvergenceTable> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("n list must be non-empty and strictly increasing"));
    }
    let d = config.dimensions.d;
    if let Reference::ClosedForm(y) = reference {
        if y.len() != d {
            return Err(Error::invalid(format!("reference has {} components, expected {d}", y.len())));
        }
    }
    if matches!(reference, Reference::FinestGrid) && n_list.len() < 2 {
        return Err(Error::invalid("a finest-grid reference needs at least two grid sizes"));
    }
    let horizon = config.horizon;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = build_grids(n, horizon, gamma)?;
        let h = grid.modulus();
        let started = Instant::now();
        let outcome = config
            .prepare_on(grid.clone(), seed, None)
            .and_then(|run| run.solve(Retention::Summary));
        let seconds = started.elapsed().as_secs_f64();
        let mut row = ConvergenceRow {
            n,
            h,
            h_reflection: grid.reflection_modulus(),
            kappa: grid.kappa(),
            y0: None,
            error: None,
            stderr: None,
            alpha: (2.0 * horizon / h).ln(),
            seconds,
            failure: None,
        };
        match outcome {
            Ok(sol) => {
                row.y0 = Some(sol.y0().to_vec());
                row.stderr = Some(sol.y0_stderr().iter().map(|s| s * s).sum::<f64>().sqrt());
            }
            Err(e) => {
                log::warn!("convergence row n = {n} failed: {e}");
                row.failure = Some(e.to_string());
            }
        }
        rows.push(row);
    }

    let reference_y0 = match reference {
        Reference::ClosedForm(y) => Some(y.clone()),
        Reference::FinestGrid => rows.last().and_then(|r| r.y0.clone()),
    };
    let last = rows.len() - 1;
    for (k, row) in rows.iter_mut().enumerate() {
        if matches!(reference, Reference::FinestGrid) && k == last {
            continue;
        }
        if let (Some(y), Some(r)) = (&row.y0, &reference_y0) {
            row.error = Some(y.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    let fit = fit_slope(&rows);
    Ok(ConvergenceTable {
        components: d,
        gamma,
        rows,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
    })
}
