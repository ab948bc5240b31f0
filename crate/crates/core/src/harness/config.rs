//! JSON problem configurations.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::condexp::{BackendKind, CondExpBackend, DEFAULT_BASIS_DEGREE, DEFAULT_RIDGE};
use crate::error::{Error, Result};
use crate::forward::{build_lattice, simulate_euler, ScenarioSet};
use crate::harness::expr::{parse_in_scope, Expr, Scope};
use crate::model::{
    build_grids, validate_costs, validate_problem, CostStructure, ScalarMap, SwitchingProblem, TimeGrid,
    ValidationReport, DEFAULT_COST_EPS,
};
use crate::scheme::{solve, Retention, SchemeSolution, SolverSettings, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::weights::{check_moments, truncated_gaussian_weights, rademacher_weights, MomentTolerance, WeightFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub m: usize,
    pub q: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSpec {
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    Lattice,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub backend: BackendName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    Rademacher,
    TruncatedGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub kind: WeightName,
    /// Truncation level; defaults to `1 / L^Z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_degree() -> usize {
    DEFAULT_BASIS_DEGREE
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            basis_degree: DEFAULT_BASIS_DEGREE,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// A problem configuration. Coefficients are expression strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dimensions: Dimensions,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift: Vec<String>,
    pub diffusion: Vec<Vec<String>>,
    pub driver: Vec<String>,
    pub terminal: Vec<String>,
    pub costs: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_epsilon: Option<f64>,
    pub lipschitz: LipschitzSpec,
    pub grid: GridSpec,
    pub scenario: ScenarioSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Closed-form `Y_0` used as a convergence reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_y0: Option<Vec<f64>>,
}

fn parse_field(field: &str, source: &str, scope: &Scope) -> Result<Expr> {
    parse_in_scope(source, scope).map_err(|e| Error::Config(format!("{field}: {e}")))
}

fn shape(field: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::Config(format!("{field} has {len} entries, expected {expected}")));
    }
    Ok(())
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the switching problem, checking shapes and expression scopes.
    pub fn build_problem(&self) -> Result<SwitchingProblem> {
        let Dimensions { m, q, d } = self.dimensions;
        if m == 0 || q == 0 || d == 0 {
            return Err(Error::Config("dimensions m, q, d must be positive".into()));
        }
        shape("x0", self.x0.len(), m)?;
        shape("drift", self.drift.len(), m)?;
        shape("diffusion", self.diffusion.len(), m)?;
        shape("driver", self.driver.len(), d)?;
        shape("terminal", self.terminal.len(), d)?;
        shape("costs", self.costs.len(), d)?;
        let state = Scope::state(m);

        let drift: Vec<Expr> = self
            .drift
            .iter()
            .enumerate()
            .map(|(k, s)| parse_field(&format!("drift[{}]", k + 1), s, &state))
            .collect::<Result<_>>()?;
        let mut diffusion = Vec::with_capacity(m * q);
        for (k, row) in self.diffusion.iter().enumerate() {
            shape(&format!("diffusion[{}]", k + 1), row.len(), q)?;
            for (l, s) in row.iter().enumerate() {
                diffusion.push(parse_field(&format!("diffusion[{}][{}]", k + 1, l + 1), s, &state)?);
            }
        }
        let mut builder = SwitchingProblem::builder(m, q, d)
            .horizon(self.horizon)
            .x0(self.x0.clone())
            .lipschitz(self.lipschitz.y, self.lipschitz.z)
            .drift(move |x, out| {
                for (o, e) in out.iter_mut().zip(&drift) {
                    *o = e.eval_x(x);
                }
            })
            .diffusion(move |x, out| {
                for (o, e) in out.iter_mut().zip(&diffusion) {
                    *o = e.eval_x(x);
                }
            });
        let driver_scope = Scope::driver(m, d, q);
        for (j, s) in self.driver.iter().enumerate() {
            let e = parse_field(&format!("driver[{}]", j + 1), s, &driver_scope)?;
            builder = builder.driver(j, move |x, y, z| e.eval(x, y, z));
        }
        for (j, s) in self.terminal.iter().enumerate() {
            let e = parse_field(&format!("terminal[{}]", j + 1), s, &state)?;
            builder = builder.terminal(j, move |x| e.eval_x(x));
        }
        let mut entries: Vec<ScalarMap> = Vec::with_capacity(d * d);
        for (i, row) in self.costs.iter().enumerate() {
            shape(&format!("costs[{}]", i + 1), row.len(), d)?;
            for (j, s) in row.iter().enumerate() {
                let e = parse_field(&format!("costs[{}][{}]", i + 1, j + 1), s, &state)?;
                entries.push(Arc::new(move |x: &[f64]| e.eval_x(x)));
            }
        }
        let costs = CostStructure::new(d, entries, self.cost_epsilon.unwrap_or(DEFAULT_COST_EPS))?;
        builder.costs(costs).build()
    }

    pub fn backend_kind(&self) -> BackendKind {
        match self.scenario.backend {
            BackendName::Lattice => BackendKind::ExactLattice,
            BackendName::Regression => BackendKind::LeastSquares {
                basis_degree: self.solver.basis_degree,
                ridge: self.solver.ridge,
            },
        }
    }

    pub fn solver_settings(&self, retention: Retention) -> SolverSettings {
        SolverSettings {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            retention,
        }
    }

    /// Weight family implied by the configuration and the backend.
    fn weight_kind(&self) -> Result<WeightName> {
        let natural = match self.scenario.backend {
            BackendName::Lattice => WeightName::Rademacher,
            BackendName::Regression => WeightName::TruncatedGaussian,
        };
        let kind = self.weights.map(|w| w.kind).unwrap_or(natural);
        if kind != natural {
            return Err(Error::Config(format!(
                "weights {kind:?} are not available with the {:?} backend",
                self.scenario.backend
            )));
        }
        Ok(kind)
    }

    pub fn truncation_level(&self) -> f64 {
        self.weights.and_then(|w| w.r).unwrap_or(1.0 / self.lipschitz.z)
    }

    /// Grid from the `grid` section.
    pub fn time_grid(&self) -> Result<TimeGrid> {
        build_grids(self.grid.n, self.horizon, self.grid.gamma)
    }

    /// Builds everything needed for a solve on the configured grid.
    pub fn prepare(&self, seed: Option<u64>) -> Result<PreparedRun> {
        self.prepare_on(self.time_grid()?, seed, None)
    }

    /// Builds a run on `grid`, optionally overriding the seed and path count.
    pub fn prepare_on(&self, grid: TimeGrid, seed: Option<u64>, n_paths: Option<usize>) -> Result<PreparedRun> {
        let problem = self.build_problem()?;
        self.weight_kind()?;
        let seed = seed.unwrap_or(self.scenario.seed);
        let scenario = match self.scenario.backend {
            BackendName::Lattice => ScenarioSet::Lattice(build_lattice(&problem, &grid)?),
            BackendName::Regression => {
                let paths = n_paths
                    .or(self.scenario.n_paths)
                    .ok_or_else(|| Error::Config("the regression backend needs scenario.n_paths".into()))?;
                ScenarioSet::Paths(simulate_euler(&problem, &grid, paths, seed)?)
            }
        };
        let weights = match &scenario {
            ScenarioSet::Lattice(l) => rademacher_weights(l),
            ScenarioSet::Paths(p) => {
                let r = self.truncation_level();
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Config("weights.r must be positive and finite".into()));
                }
                truncated_gaussian_weights(p, r)
            }
        };
        Ok(PreparedRun {
            problem,
            grid,
            scenario,
            weights,
            backend: self.backend_kind(),
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        })
    }
}

/// A problem with its scenario set and weights, ready to solve.
pub struct PreparedRun {
    pub problem: SwitchingProblem,
    pub grid: TimeGrid,
    pub scenario: ScenarioSet,
    pub weights: WeightFamily,
    pub backend: BackendKind,
    pub tol: f64,
    pub max_iter: usize,
}

impl PreparedRun {
    pub fn settings(&self, retention: Retention) -> SolverSettings {
        SolverSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            retention,
        }
    }

    pub fn solve(&self, retention: Retention) -> Result<SchemeSolution> {
        self.solve_on(&self.grid, retention)
    }

    /// Solves with the reflection dates of `grid` (same dates as the scenario).
    pub fn solve_on(&self, grid: &TimeGrid, retention: Retention) -> Result<SchemeSolution> {
        let backend = CondExpBackend::bind(self.backend, &self.scenario)?;
        solve(&self.problem, grid, &self.scenario, &self.weights, &backend, &self.settings(retention))
    }

    /// Model checks on sampled states plus weight moment checks.
    pub fn validate(&self, sample_points: usize) -> ValidationReport {
        let points = self.scenario.sample_states(sample_points);
        let costs = validate_costs(&self.problem.costs, &points, self.problem.costs.epsilon());
        let model = validate_problem(&self.problem, &points);
        let tol = match self.scenario {
            ScenarioSet::Lattice(_) => MomentTolerance::Absolute(1e-12),
            ScenarioSet::Paths(_) => MomentTolerance::StandardErrors(5.0),
        };
        let moments = check_moments(&self.weights, &self.scenario, self.problem.lipschitz_z, tol);
        costs.merge(model).merge(moments)
    }
}
