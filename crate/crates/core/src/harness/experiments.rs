//! Stability and reflection-refinement studies.

use serde::{Deserialize, Serialize};

use crate::condexp::CondExpBackend;
use crate::error::{Error, Result};
use crate::harness::config::PreparedRun;
use crate::scheme::{solve_generic, Perturbation, Perturbed, ProblemInputs, Retention};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub zeta: f64,
    pub y0: Vec<f64>,
    /// Euclidean norm of the change in `Y_0`.
    pub delta: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStudy {
    pub base_y0: Vec<f64>,
    pub rows: Vec<PerturbationRow>,
    /// Largest over smallest `|dY_0| / zeta`; `None` if a ratio vanishes.
    pub spread: Option<f64>,
}

/// Shifts every generator component by `zeta` and records the response of
/// `Y_0` on the same scenario set.
pub fn perturbation_study(run: &PreparedRun, zetas: &[f64]) -> Result<PerturbationStudy> {
    if zetas.is_empty() || zetas.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
        return Err(Error::invalid("perturbation sizes must be positive and finite"));
    }
    let backend = CondExpBackend::bind(run.backend, &run.scenario)?;
    let settings = run.settings(Retention::Summary);
    let base_inputs = ProblemInputs(&run.problem);
    let base = solve_generic(&base_inputs, &run.grid, &run.scenario, &run.weights, &backend, &settings)?;
    let d = run.problem.modes;
    let mut rows = Vec::with_capacity(zetas.len());
    for &zeta in zetas {
        let mut shift = Perturbation::none(d);
        shift.driver = vec![zeta; d];
        let inputs = Perturbed {
            inner: &base_inputs,
            shift,
        };
        let sol = solve_generic(&inputs, &run.grid, &run.scenario, &run.weights, &backend, &settings)?;
        let delta = euclid(sol.y0(), base.y0());
        rows.push(PerturbationRow {
            zeta,
            y0: sol.y0().to_vec(),
            delta,
            ratio: delta / zeta,
        });
    }
    let max = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let spread = (min > 0.0).then(|| max / min);
    Ok(PerturbationStudy {
        base_y0: base.y0().to_vec(),
        rows,
        spread,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    /// Reflection every `every` steps of the time grid.
    pub every: usize,
    pub h_reflection: f64,
    pub y0: Vec<f64>,
    /// Distance to `Y_0` with reflection at every date.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub reference_y0: Vec<f64>,
    pub rows: Vec<RefinementRow>,
}

/// `sqrt(h log(2T/h))`, the size of the drift expected from reflecting on
/// dates of spacing `h` over a horizon `T`.
pub fn reflection_error_scale(h: f64, horizon: f64) -> f64 {
    (h * (2.0 * horizon / h).ln()).sqrt()
}

impl RefinementStudy {
    /// Observed drift ratios between consecutive rows, paired with the
    /// ratio predicted by [`reflection_error_scale`].
    pub fn ratios(&self, horizon: f64) -> Vec<(f64, f64)> {
        self.rows
            .windows(2)
            .map(|w| {
                let observed = w[1].drift / w[0].drift;
                let expected = reflection_error_scale(w[1].h_reflection, horizon)
                    / reflection_error_scale(w[0].h_reflection, horizon);
                (observed, expected)
            })
            .collect()
    }
}

/// Solves on the run's scenario set with reflection every `every[k]` steps,
/// measuring the drift from reflection at every date.
pub fn reflection_refinement(run: &PreparedRun, every: &[usize]) -> Result<RefinementStudy> {
    let backend = CondExpBackend::bind(run.backend, &run.scenario)?;
    let settings = run.settings(Retention::Summary);
    let inputs = ProblemInputs(&run.problem);
    let fine_grid = run.grid.with_reflection_every(1)?;
    let reference = solve_generic(&inputs, &fine_grid, &run.scenario, &run.weights, &backend, &settings)?;
    let mut rows = Vec::with_capacity(every.len());
    for &k in every {
        let grid = run.grid.with_reflection_every(k)?;
        let sol = solve_generic(&inputs, &grid, &run.scenario, &run.weights, &backend, &settings)?;
        rows.push(RefinementRow {
            every: k,
            h_reflection: grid.reflection_modulus(),
            y0: sol.y0().to_vec(),
            drift: euclid(sol.y0(), reference.y0()),
        });
    }
    Ok(RefinementStudy {
        reference_y0: reference.y0().to_vec(),
        rows,
    })
}
