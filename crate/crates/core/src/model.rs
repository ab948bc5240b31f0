//! Problem definition: time and reflection grids, switching costs, the
//! forward/backward coefficients, and checks of the standing assumptions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{domain_violation, CostMatrix};

/// Default margin used when validating the cost structure condition.
pub const DEFAULT_COST_EPS: f64 = 1e-8;
/// Default tolerance for domain membership diagnostics.
pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-10;

/// Time partition `t_0 = 0 < ... < t_n = T` with the reflection dates flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    reflection: Vec<bool>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, reflection: Vec<bool>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a time grid needs at least two dates"));
        }
        if reflection.len() != times.len() {
            return Err(Error::invalid("one reflection flag per date is required"));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid("time grids start at t_0 = 0"));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid dates must be finite and strictly increasing"));
        }
        if !reflection[0] || !reflection[times.len() - 1] {
            return Err(Error::invalid("the first and last dates must be reflection dates"));
        }
        Ok(Self { times, reflection })
    }

    /// Uniform grid with every date a reflection date.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("a uniform grid needs n >= 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon T must be positive and finite"));
        }
        let h = horizon / n as f64;
        let mut times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        times[n] = horizon;
        Self::new(times, vec![true; n + 1])
    }

    /// Same dates, reflection on every `every`-th index plus the last one.
    pub fn with_reflection_every(&self, every: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::invalid("reflection stride must be positive"));
        }
        let n = self.n();
        let flags = (0..=n).map(|i| i % every == 0 || i == n).collect();
        Self::new(self.times.clone(), flags)
    }

    /// Same dates, reflection exactly on the given indices (0 and n are added).
    pub fn with_reflection_indices(&self, indices: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut flags = vec![false; n + 1];
        for &i in indices {
            if i > n {
                return Err(Error::invalid(format!("reflection index {i} exceeds n = {n}")));
            }
            flags[i] = true;
        }
        flags[0] = true;
        flags[n] = true;
        Self::new(self.times.clone(), flags)
    }

    /// Number of steps `n`.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.n()]
    }

    /// Step `h_i = t_{i+1} - t_i`.
    pub fn step(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// `|pi|`, the largest step.
    pub fn modulus(&self) -> f64 {
        (0..self.n()).map(|i| self.step(i)).fold(0.0, f64::max)
    }

    pub fn is_reflection(&self, i: usize) -> bool {
        self.reflection[i]
    }

    pub fn reflection_flags(&self) -> &[bool] {
        &self.reflection
    }

    pub fn reflection_indices(&self) -> Vec<usize> {
        (0..=self.n()).filter(|&i| self.reflection[i]).collect()
    }

    /// `kappa`, the number of reflection dates.
    pub fn kappa(&self) -> usize {
        self.reflection.iter().filter(|&&r| r).count()
    }

    /// `|R|`, the largest gap between consecutive reflection dates.
    pub fn reflection_modulus(&self) -> f64 {
        self.reflection_indices()
            .windows(2)
            .map(|w| self.times[w[1]] - self.times[w[0]])
            .fold(0.0, f64::max)
    }

    /// True when both grids share the same dates (reflection flags may differ).
    pub fn same_dates(&self, other: &TimeGrid) -> bool {
        self.times == other.times
    }
}

/// Uniform partition with `h = T/n` and reflection dates picked as the grid
/// points closest to a uniform grid of spacing about `|pi|^gamma`.
pub fn build_grids(n: usize, horizon: f64, gamma: f64) -> Result<TimeGrid> {
    if n < 2 {
        return Err(Error::invalid(format!("build_grids needs n >= 2, got {n}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let grid = TimeGrid::uniform(n, horizon)?;
    if gamma == 1.0 {
        return Ok(grid);
    }
    let h = horizon / n as f64;
    let target = h.powf(gamma);
    let intervals = ((horizon / target).round() as usize).clamp(1, n);
    let indices: Vec<usize> = (0..=intervals)
        .map(|k| ((k as f64 * n as f64) / intervals as f64).round() as usize)
        .collect();
    grid.with_reflection_indices(&indices)
}

pub type StateMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// One component of the driver: `(x, y, z_row) -> f^j(x, y, z^{j.})`.
pub type DriverComponent = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;

/// State-dependent switching costs `x -> c^{ij}(x)`.
#[derive(Clone)]
pub struct CostStructure {
    d: usize,
    entries: Vec<ScalarMap>,
    epsilon: f64,
}

impl CostStructure {
    pub fn new(d: usize, entries: Vec<ScalarMap>, epsilon: f64) -> Result<Self> {
        if d == 0 || entries.len() != d * d {
            return Err(Error::invalid(format!(
                "cost structure needs d*d = {} entries, got {}",
                d * d,
                entries.len()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("cost lower bound epsilon must be positive"));
        }
        Ok(Self { d, entries, epsilon })
    }

    /// Constant costs read from a row-major matrix.
    pub fn constant(matrix: &CostMatrix) -> Self {
        let d = matrix.dim();
        let entries = matrix
            .entries()
            .iter()
            .map(|&c| Arc::new(move |_: &[f64]| c) as ScalarMap)
            .collect();
        Self {
            d,
            entries,
            epsilon: DEFAULT_COST_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn entry(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        (self.entries[i * self.d + j])(x)
    }

    /// Cost matrix at `x`; fails if a diagonal entry is not zero.
    pub fn evaluate(&self, x: &[f64]) -> Result<CostMatrix> {
        let values = self.entries.iter().map(|c| c(x)).collect();
        CostMatrix::new(self.d, values)
    }
}

impl fmt::Debug for CostStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostStructure")
            .field("d", &self.d)
            .field("epsilon", &self.epsilon)
            .finish_non_exhaustive()
    }
}

/// Forward SDE coefficients, driver, terminal condition and costs of a
/// switching problem with `m`-dimensional state, `q`-dimensional Brownian
/// motion and `d` modes.
#[derive(Clone)]
pub struct SwitchingProblem {
    pub state_dim: usize,
    pub brownian_dim: usize,
    pub modes: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    drift: StateMap,
    diffusion: StateMap,
    driver: Vec<DriverComponent>,
    terminal: Vec<ScalarMap>,
    pub costs: CostStructure,
    pub lipschitz_y: f64,
    pub lipschitz_z: f64,
}

impl fmt::Debug for SwitchingProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchingProblem")
            .field("state_dim", &self.state_dim)
            .field("brownian_dim", &self.brownian_dim)
            .field("modes", &self.modes)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("lipschitz_y", &self.lipschitz_y)
            .field("lipschitz_z", &self.lipschitz_z)
            .finish_non_exhaustive()
    }
}

/// Builder for [`SwitchingProblem`]. Unset coefficients default to zero
/// (zero drift, zero diffusion, zero driver, zero terminal value).
pub struct ProblemBuilder {
    m: usize,
    q: usize,
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: Option<StateMap>,
    diffusion: Option<StateMap>,
    driver: Vec<Option<DriverComponent>>,
    terminal: Vec<Option<ScalarMap>>,
    costs: Option<CostStructure>,
    lipschitz_y: f64,
    lipschitz_z: f64,
}

impl ProblemBuilder {
    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }

    pub fn x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }

    pub fn drift(mut self, b: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(b));
        self
    }

    /// `sigma(x)` written row-major into an `m * q` buffer.
    pub fn diffusion(mut self, s: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(s));
        self
    }

    pub fn driver(
        mut self,
        component: usize,
        f: impl Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        if component < self.d {
            self.driver[component] = Some(Arc::new(f));
        }
        self
    }

    pub fn terminal(mut self, component: usize, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        if component < self.d {
            self.terminal[component] = Some(Arc::new(g));
        }
        self
    }

    pub fn costs(mut self, costs: CostStructure) -> Self {
        self.costs = Some(costs);
        self
    }

    pub fn constant_costs(self, matrix: &CostMatrix) -> Self {
        self.costs(CostStructure::constant(matrix))
    }

    pub fn lipschitz(mut self, l_y: f64, l_z: f64) -> Self {
        self.lipschitz_y = l_y;
        self.lipschitz_z = l_z;
        self
    }

    pub fn build(self) -> Result<SwitchingProblem> {
        let (m, q, d) = (self.m, self.q, self.d);
        if m == 0 || q == 0 || d == 0 {
            return Err(Error::invalid("dimensions m, q and d must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid("horizon T must be positive and finite"));
        }
        if self.x0.len() != m {
            return Err(Error::invalid(format!(
                "x0 has {} components, state dimension is {m}",
                self.x0.len()
            )));
        }
        if !(self.lipschitz_y > 0.0) || !(self.lipschitz_z > 0.0) {
            return Err(Error::invalid("declared Lipschitz constants L^Y and L^Z must be positive"));
        }
        let costs = self
            .costs
            .ok_or_else(|| Error::invalid("switching costs are required"))?;
        if costs.dim() != d {
            return Err(Error::invalid(format!(
                "cost structure has {} modes, problem has {d}",
                costs.dim()
            )));
        }
        let zero_driver: DriverComponent = Arc::new(|_: &[f64], _: &[f64], _: &[f64]| 0.0);
        let zero_terminal: ScalarMap = Arc::new(|_: &[f64]| 0.0);
        Ok(SwitchingProblem {
            state_dim: m,
            brownian_dim: q,
            modes: d,
            horizon: self.horizon,
            x0: self.x0,
            drift: self
                .drift
                .unwrap_or_else(|| Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0))),
            diffusion: self
                .diffusion
                .unwrap_or_else(|| Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0))),
            driver: self
                .driver
                .into_iter()
                .map(|f| f.unwrap_or_else(|| zero_driver.clone()))
                .collect(),
            terminal: self
                .terminal
                .into_iter()
                .map(|g| g.unwrap_or_else(|| zero_terminal.clone()))
                .collect(),
            costs,
            lipschitz_y: self.lipschitz_y,
            lipschitz_z: self.lipschitz_z,
        })
    }
}

impl SwitchingProblem {
    pub fn builder(m: usize, q: usize, d: usize) -> ProblemBuilder {
        ProblemBuilder {
            m,
            q,
            d,
            horizon: 1.0,
            x0: vec![0.0; m],
            drift: None,
            diffusion: None,
            driver: vec![None; d],
            terminal: vec![None; d],
            costs: None,
            lipschitz_y: 1.0,
            lipschitz_z: 1.0,
        }
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    /// Driver component `j`; `z_row` is row `j` of `z`, of length `q`.
    #[inline]
    pub fn driver(&self, j: usize, x: &[f64], y: &[f64], z_row: &[f64]) -> f64 {
        (self.driver[j])(x, y, z_row)
    }

    pub fn terminal(&self, x: &[f64]) -> Vec<f64> {
        self.terminal.iter().map(|g| g(x)).collect()
    }

    pub fn cost_matrix(&self, x: &[f64]) -> Result<CostMatrix> {
        self.costs.evaluate(x)
    }
}

/// One failed check in a validation report. Mode, component and coordinate
/// indices are zero-based; [`fmt::Display`] prints them one-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonZeroDiagonal { mode: usize, point: usize, value: f64 },
    Positivity { i: usize, j: usize, point: usize, value: f64 },
    Structure { i: usize, j: usize, l: usize, point: usize, margin: f64 },
    Membership { point: usize, component: usize, shortfall: f64 },
    Lipschitz { variable: String, estimated: f64, declared: f64 },
    MomentMean { interval: usize, coordinate: usize, deviation: f64, tolerance: f64 },
    MomentCovariance { interval: usize, row: usize, col: usize, deviation: f64, tolerance: f64 },
    WeightBound { interval: usize, bound: f64 },
    Lambda { interval: usize, lambda: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonZeroDiagonal { mode, point, value } => {
                write!(f, "c^({0},{0}) = {value} != 0 at sample {point}", mode + 1)
            }
            Violation::Positivity { i, j, point, value } => write!(
                f,
                "positivity: c^({},{}) = {value} below epsilon at sample {point}",
                i + 1,
                j + 1
            ),
            Violation::Structure { i, j, l, point, margin } => write!(
                f,
                "structure condition fails at ({},{},{}): margin {margin} at sample {point}",
                i + 1,
                j + 1,
                l + 1
            ),
            Violation::Membership { point, component, shortfall } => write!(
                f,
                "terminal value outside the domain at sample {point}: component {} short by {shortfall}",
                component + 1
            ),
            Violation::Lipschitz { variable, estimated, declared } => write!(
                f,
                "Lipschitz constant in {variable}: estimated {estimated} exceeds declared {declared}"
            ),
            Violation::MomentMean { interval, coordinate, deviation, tolerance } => write!(
                f,
                "weight mean on interval {interval}, coordinate {}: deviation {deviation} > {tolerance}",
                coordinate + 1
            ),
            Violation::MomentCovariance { interval, row, col, deviation, tolerance } => write!(
                f,
                "weight second moment on interval {interval}, entry ({},{}): deviation {deviation} > {tolerance}",
                row + 1,
                col + 1
            ),
            Violation::WeightBound { interval, bound } => write!(
                f,
                "weight bound h|H|L^Z = {bound} > 1 on interval {interval}"
            ),
            Violation::Lambda { interval, lambda } => {
                write!(f, "non-positive lambda {lambda} on interval {interval}")
            }
        }
    }
}

/// Outcome of a report-only check. Empty `violations` means PASS on the
/// inspected sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checked_points: usize,
    /// Smallest margin observed by the check (negative when violated).
    pub min_margin: f64,
    pub violations: Vec<Violation>,
}

impl Default for ValidationReport {
    fn default() -> Self {
        Self {
            checked_points: 0,
            min_margin: f64::INFINITY,
            violations: Vec::new(),
        }
    }
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(mut self, other: ValidationReport) -> Self {
        self.checked_points += other.checked_points;
        self.min_margin = self.min_margin.min(other.min_margin);
        self.violations.extend(other.violations);
        self
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(f, "PASS ({} points, min margin {})", self.checked_points, self.min_margin + 0.0)
        } else {
            writeln!(
                f,
                "FAIL ({} violations over {} points, min margin {})",
                self.violations.len(),
                self.checked_points,
                self.min_margin + 0.0
            )?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
            Ok(())
        }
    }
}

/// Checks zero diagonal, positivity `c^{ij} >= eps` and the triangle
/// margins `c^{ij} + c^{jl} - c^{il} >= eps` at every sample point.
pub fn validate_costs(costs: &CostStructure, sample_points: &[Vec<f64>], eps: f64) -> ValidationReport {
    let d = costs.dim();
    let mut report = ValidationReport {
        checked_points: sample_points.len(),
        ..Default::default()
    };
    for (p, x) in sample_points.iter().enumerate() {
        let c: Vec<f64> = (0..d * d).map(|k| costs.entry(k / d, k % d, x)).collect();
        let at = |i: usize, j: usize| c[i * d + j];
        for i in 0..d {
            if at(i, i) != 0.0 {
                report.violations.push(Violation::NonZeroDiagonal {
                    mode: i,
                    point: p,
                    value: at(i, i),
                });
            }
        }
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                report.min_margin = report.min_margin.min(at(i, j));
                if !(at(i, j) >= eps) {
                    report.violations.push(Violation::Positivity {
                        i,
                        j,
                        point: p,
                        value: at(i, j),
                    });
                }
                for l in 0..d {
                    if l == j {
                        continue;
                    }
                    let margin = at(i, j) + at(j, l) - at(i, l);
                    report.min_margin = report.min_margin.min(margin);
                    if !(margin >= eps) {
                        report.violations.push(Violation::Structure {
                            i,
                            j,
                            l,
                            point: p,
                            margin,
                        });
                    }
                }
            }
        }
    }
    report
}

/// Checks `g(x) in Q(x)` at every sample and compares finite-difference
/// Lipschitz estimates of the driver with the declared `L^Y`, `L^Z`
/// (10% slack). The `y` estimate is the sup-norm operator bound (largest
/// absolute row sum of the Jacobian); the `z` estimate is the Euclidean
/// norm of the gradient in the component's own row.
pub fn validate_problem(problem: &SwitchingProblem, sample_points: &[Vec<f64>]) -> ValidationReport {
    let (d, q) = (problem.modes, problem.brownian_dim);
    let mut report = ValidationReport {
        checked_points: sample_points.len(),
        ..Default::default()
    };
    let mut est_y: f64 = 0.0;
    let mut est_z: f64 = 0.0;
    for (p, x) in sample_points.iter().enumerate() {
        let g = problem.terminal(x);
        match problem.cost_matrix(x) {
            Ok(c) => {
                let shortfall = domain_violation(&c, &g);
                report.min_margin = report.min_margin.min(-shortfall);
                if shortfall > DEFAULT_MEMBERSHIP_TOL {
                    for i in 0..d {
                        let need = (0..d).map(|j| g[j] - c.get(i, j)).fold(f64::MIN, f64::max);
                        if need - g[i] > DEFAULT_MEMBERSHIP_TOL {
                            report.violations.push(Violation::Membership {
                                point: p,
                                component: i,
                                shortfall: need - g[i],
                            });
                        }
                    }
                }
            }
            Err(_) => {
                // Diagonal problems are reported by validate_costs.
            }
        }

        let y_bases = [vec![0.0; d], g.clone()];
        let z_bases = [vec![0.0; d * q], vec![1.0; d * q]];
        for y in &y_bases {
            for z in &z_bases {
                let (ly, lz) = driver_lipschitz_estimate(problem, x, y, z);
                est_y = est_y.max(ly);
                est_z = est_z.max(lz);
            }
        }
    }
    if est_y > 1.1 * problem.lipschitz_y {
        report.violations.push(Violation::Lipschitz {
            variable: "y".into(),
            estimated: est_y,
            declared: problem.lipschitz_y,
        });
    }
    if est_z > 1.1 * problem.lipschitz_z {
        report.violations.push(Violation::Lipschitz {
            variable: "z".into(),
            estimated: est_z,
            declared: problem.lipschitz_z,
        });
    }
    report
}

fn driver_lipschitz_estimate(problem: &SwitchingProblem, x: &[f64], y: &[f64], z: &[f64]) -> (f64, f64) {
    let (d, q) = (problem.modes, problem.brownian_dim);
    let mut ly: f64 = 0.0;
    let mut lz: f64 = 0.0;
    for j in 0..d {
        let z_row = &z[j * q..(j + 1) * q];
        let mut row_sum = 0.0;
        let mut yp = y.to_vec();
        for k in 0..d {
            let delta = 1e-6 * y[k].abs().max(1.0);
            yp[k] = y[k] + delta;
            let up = problem.driver(j, x, &yp, z_row);
            yp[k] = y[k] - delta;
            let down = problem.driver(j, x, &yp, z_row);
            yp[k] = y[k];
            row_sum += ((up - down) / (2.0 * delta)).abs();
        }
        ly = ly.max(row_sum);

        let mut grad_sq = 0.0;
        let mut zp = z_row.to_vec();
        for l in 0..q {
            let delta = 1e-6 * z_row[l].abs().max(1.0);
            zp[l] = z_row[l] + delta;
            let up = problem.driver(j, x, y, &zp);
            zp[l] = z_row[l] - delta;
            let down = problem.driver(j, x, y, &zp);
            zp[l] = z_row[l];
            grad_sq += ((up - down) / (2.0 * delta)).powi(2);
        }
        lz = lz.max(grad_sq.sqrt());
    }
    (ly, lz)
}
