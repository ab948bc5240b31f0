//! The discretely obliquely reflected backward scheme
//!
//! ```text
//! Z_i = E[Y_{i+1} H_i | F_i]
//! Yt_i = E[Y_{i+1} | F_i] + h_i F_i(Yt_i, Z_i)
//! Y_i = P(X_i, Yt_i) if t_i is a reflection date, Yt_i otherwise
//! ```
//!
//! started from `Y_n = xi`. The implicit step is solved by Picard iteration.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::CondExpBackend;
use crate::error::{Error, Result};
use crate::forward::ScenarioSet;
use crate::model::{SwitchingProblem, TimeGrid, DEFAULT_MEMBERSHIP_TOL};
use crate::projection::{domain_violation, CostMatrix};
use crate::weights::WeightFamily;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Per-step inputs of the generic scheme: generators, costs and terminal
/// values, possibly depending on the scenario node.
pub trait StepInputs: Sync {
    fn components(&self) -> usize;

    /// Upper bound on the Lipschitz constant of the generator in `y`.
    fn lipschitz_y(&self) -> f64;

    fn lipschitz_z(&self) -> f64;

    /// Component `j` of `F_i` at `node` (state `x`), evaluated at `(y, z^{j.})`.
    fn driver(&self, i: usize, node: usize, x: &[f64], j: usize, y: &[f64], z_row: &[f64]) -> f64;

    fn costs(&self, i: usize, node: usize, x: &[f64]) -> Result<CostMatrix>;

    fn terminal(&self, node: usize, x: &[f64]) -> Vec<f64>;
}

/// The scheme's own inputs: `F_i = f(X_i, ., .)`, `C = c(X_i)`, `xi = g(X_T)`.
#[derive(Clone, Copy)]
pub struct ProblemInputs<'a>(pub &'a SwitchingProblem);

impl StepInputs for ProblemInputs<'_> {
    fn components(&self) -> usize {
        self.0.modes
    }

    fn lipschitz_y(&self) -> f64 {
        self.0.lipschitz_y
    }

    fn lipschitz_z(&self) -> f64 {
        self.0.lipschitz_z
    }

    #[inline]
    fn driver(&self, _i: usize, _node: usize, x: &[f64], j: usize, y: &[f64], z_row: &[f64]) -> f64 {
        self.0.driver(j, x, y, z_row)
    }

    fn costs(&self, _i: usize, _node: usize, x: &[f64]) -> Result<CostMatrix> {
        self.0.cost_matrix(x)
    }

    fn terminal(&self, _node: usize, x: &[f64]) -> Vec<f64> {
        self.0.terminal(x)
    }
}

/// Constant shifts of another input set: `driver[j]` is added to `F^j`,
/// `terminal[j]` to `xi^j`, and `costs` to every off-diagonal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub driver: Vec<f64>,
    pub terminal: Vec<f64>,
    pub costs: f64,
}

impl Perturbation {
    pub fn none(d: usize) -> Self {
        Self {
            driver: vec![0.0; d],
            terminal: vec![0.0; d],
            costs: 0.0,
        }
    }
}

pub struct Perturbed<'a, I: StepInputs> {
    pub inner: &'a I,
    pub shift: Perturbation,
}

impl<I: StepInputs> StepInputs for Perturbed<'_, I> {
    fn components(&self) -> usize {
        self.inner.components()
    }

    fn lipschitz_y(&self) -> f64 {
        self.inner.lipschitz_y()
    }

    fn lipschitz_z(&self) -> f64 {
        self.inner.lipschitz_z()
    }

    fn driver(&self, i: usize, node: usize, x: &[f64], j: usize, y: &[f64], z_row: &[f64]) -> f64 {
        self.inner.driver(i, node, x, j, y, z_row) + self.shift.driver[j]
    }

    fn costs(&self, i: usize, node: usize, x: &[f64]) -> Result<CostMatrix> {
        Ok(self.inner.costs(i, node, x)?.shifted(self.shift.costs))
    }

    fn terminal(&self, node: usize, x: &[f64]) -> Vec<f64> {
        let mut xi = self.inner.terminal(node, x);
        for (v, s) in xi.iter_mut().zip(&self.shift.terminal) {
            *v += s;
        }
        xi
    }
}

/// What a solve keeps in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// Every level's `Yt, Y, Z, dK`.
    Full,
    /// Level 0 plus per-level aggregates; needed for large ensembles.
    Summary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub retention: Retention,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            retention: Retention::Full,
        }
    }
}

/// Result of a Picard solve of `y = e + h F(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardOutcome {
    pub value: Vec<f64>,
    /// Contractions performed after the first residual was measured.
    pub iterations: usize,
    /// `|Phi(e) - e|_inf`.
    pub first_residual: f64,
    pub residual: f64,
}

/// Solves `y = e + h F(y)` by Picard iteration from `y = e`. `driver(y, out)`
/// writes `F(y)`. Stops when the sup-norm step falls below `tol`, or below
/// four ulps of `|y|_inf` when `tol` is finer than the representable spacing.
pub fn picard_solve(
    e: &[f64],
    h: f64,
    tol: f64,
    max_iter: usize,
    mut driver: impl FnMut(&[f64], &mut [f64]),
) -> Result<PicardOutcome> {
    let d = e.len();
    let mut y = e.to_vec();
    let mut f = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut first_residual = None;
    let mut iterations = 0;
    loop {
        driver(&y, &mut f);
        let mut residual = 0.0f64;
        let mut size = 0.0f64;
        for j in 0..d {
            next[j] = e[j] + h * f[j];
            residual = residual.max((next[j] - y[j]).abs());
            size = size.max(next[j].abs());
        }
        std::mem::swap(&mut y, &mut next);
        if !residual.is_finite() {
            return Err(Error::IterationFailure {
                time_index: None,
                residual,
                iterations,
            });
        }
        let first = *first_residual.get_or_insert(residual);
        if residual <= tol.max(4.0 * f64::EPSILON * size) {
            return Ok(PicardOutcome {
                value: y,
                iterations,
                first_residual: first,
                residual,
            });
        }
        if iterations >= max_iter {
            return Err(Error::IterationFailure {
                time_index: None,
                residual,
                iterations,
            });
        }
        iterations += 1;
    }
}

/// Geometric bound on Picard contractions for contraction factor `rho`.
pub fn picard_iteration_bound(tol: f64, rho: f64, first_residual: f64) -> usize {
    if first_residual <= tol || rho <= 0.0 {
        return if first_residual <= tol { 0 } else { 1 };
    }
    let k = ((tol * (1.0 - rho) / first_residual).ln() / rho.ln()).ceil();
    k.max(0.0) as usize
}

/// Output of one implicit backward step at time index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `count(i) x d`.
    pub ytilde: Vec<f64>,
    /// `count(i) x d x q`, row `j` of node `p` at `(p * d + j) * q`.
    pub z: Vec<f64>,
    pub max_iterations: usize,
    pub max_first_residual: f64,
}

/// Computes `Z_i` and solves the implicit equation for `Yt_i` at every node
/// of level `i`, given `Y_{i+1}` (`count(i + 1) x d`).
pub fn backward_step<I: StepInputs + ?Sized>(
    inputs: &I,
    scenario: &ScenarioSet,
    weights: &WeightFamily,
    backend: &CondExpBackend,
    i: usize,
    y_next: &[f64],
    settings: &SolverSettings,
) -> Result<StepOutput> {
    let d = inputs.components();
    let q = scenario.brownian_dim();
    let h = scenario.grid().step(i);
    let (expect, z) = conditional_moments(scenario, weights, backend, i, y_next, d)?;

    let count = scenario.count(i);
    let mut ytilde = vec![0.0; count * d];
    let stats: Vec<Result<(usize, f64)>> = ytilde
        .par_chunks_mut(d)
        .zip(expect.par_chunks(d).zip(z.par_chunks(d * q)))
        .enumerate()
        .map(|(node, (out, (e, zn)))| {
            let x = scenario.state(i, node);
            let o = picard_solve(e, h, settings.tol, settings.max_iter, |y, f| {
                for j in 0..d {
                    f[j] = inputs.driver(i, node, x, j, y, &zn[j * q..(j + 1) * q]);
                }
            })?;
            out.copy_from_slice(&o.value);
            Ok((o.iterations, o.first_residual))
        })
        .collect();
    let mut max_iterations = 0;
    let mut max_first_residual = 0.0f64;
    for s in stats {
        let (it, r0) = s.map_err(|e| e.at_time(i))?;
        max_iterations = max_iterations.max(it);
        max_first_residual = max_first_residual.max(r0);
    }
    Ok(StepOutput {
        ytilde,
        z,
        max_iterations,
        max_first_residual,
    })
}

/// `E[Y_{i+1} | F_i]` (`count(i) x d`) and `E[Y_{i+1} H_i | F_i]`
/// (`count(i) x d x q`).
pub(crate) fn conditional_moments(
    scenario: &ScenarioSet,
    weights: &WeightFamily,
    backend: &CondExpBackend,
    i: usize,
    y_next: &[f64],
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = scenario.brownian_dim();
    let cols = d + d * q;
    let children = scenario.count(i + 1);
    if y_next.len() != children * d {
        return Err(Error::invalid(format!(
            "expected {children} x {d} values at time index {}, got {}",
            i + 1,
            y_next.len()
        )));
    }
    let mut targets = vec![0.0; children * cols];
    targets.par_chunks_mut(cols).enumerate().for_each(|(c, row)| {
        let y = &y_next[c * d..(c + 1) * d];
        let w = weights.row(i, c);
        row[..d].copy_from_slice(y);
        for j in 0..d {
            for l in 0..q {
                row[d + j * q + l] = y[j] * w[l];
            }
        }
    });
    let fitted = backend.condexp(i, &targets, cols)?;
    let count = scenario.count(i);
    let mut expect = vec![0.0; count * d];
    let mut z = vec![0.0; count * d * q];
    expect
        .par_chunks_mut(d)
        .zip(z.par_chunks_mut(d * q))
        .enumerate()
        .for_each(|(p, (e, zp))| {
            let row = &fitted[p * cols..(p + 1) * cols];
            e.copy_from_slice(&row[..d]);
            zp.copy_from_slice(&row[d..]);
        });
    Ok((expect, z))
}

/// Reflection at one level: `Y = P(C, Yt)` and `dK = Y - Yt` on reflection
/// dates, the identity with `dK = 0` otherwise. `costs[p]` belongs to node `p`.
pub fn reflect_step(ytilde: &[f64], costs: &[CostMatrix], is_reflection: bool) -> (Vec<f64>, Vec<f64>) {
    let mut y = ytilde.to_vec();
    let mut dk = vec![0.0; ytilde.len()];
    if is_reflection {
        for (p, c) in costs.iter().enumerate() {
            let d = c.dim();
            let span = p * d..(p + 1) * d;
            c.project_into(&ytilde[span.clone()], &mut y[span.clone()]);
            for k in span {
                dk[k] = y[k] - ytilde[k];
            }
        }
    }
    (y, dk)
}

/// Scheme values at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelValues {
    pub ytilde: Vec<f64>,
    pub y: Vec<f64>,
    /// Empty at the terminal level.
    pub z: Vec<f64>,
    pub dk: Vec<f64>,
}

/// Per-level diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub time_index: usize,
    pub time: f64,
    pub reflection: bool,
    pub max_iterations: usize,
    pub max_first_residual: f64,
    /// Share of nodes where the projection moved `Yt`.
    pub projection_active: f64,
    /// Largest domain violation of `Y`; reflection dates only.
    pub max_domain_violation: Option<f64>,
    /// Nodes where `Y` misses the domain by more than the membership tolerance.
    pub membership_failures: usize,
}

/// Probability-weighted mean and standard error (over nodes) of `Y`, `Yt`
/// and `dK` per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAggregate {
    pub mean_y: Vec<f64>,
    pub stderr_y: Vec<f64>,
    pub mean_ytilde: Vec<f64>,
    pub mean_dk: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SchemeSolution {
    grid: TimeGrid,
    d: usize,
    q: usize,
    counts: Vec<usize>,
    levels: Vec<Option<LevelValues>>,
    aggregates: Vec<LevelAggregate>,
    diagnostics: Vec<StepDiagnostics>,
    y0_stderr: Vec<f64>,
}

impl SchemeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.d
    }

    pub fn brownian_dim(&self) -> usize {
        self.q
    }

    pub fn count(&self, i: usize) -> usize {
        self.counts[i]
    }

    pub fn level(&self, i: usize) -> Option<&LevelValues> {
        self.levels[i].as_ref()
    }

    pub fn is_full(&self) -> bool {
        self.levels.iter().all(Option::is_some)
    }

    fn retained(&self, i: usize) -> &LevelValues {
        self.levels[i]
            .as_ref()
            .unwrap_or_else(|| panic!("level {i} was not retained; solve with full retention"))
    }

    /// `Yt_i` at `node`. Panics if the level was not retained.
    pub fn ytilde(&self, i: usize, node: usize) -> &[f64] {
        &self.retained(i).ytilde[node * self.d..(node + 1) * self.d]
    }

    pub fn y(&self, i: usize, node: usize) -> &[f64] {
        &self.retained(i).y[node * self.d..(node + 1) * self.d]
    }

    pub fn dk(&self, i: usize, node: usize) -> &[f64] {
        &self.retained(i).dk[node * self.d..(node + 1) * self.d]
    }

    /// `Z_i` at `node` as `d` rows of length `q`.
    pub fn z(&self, i: usize, node: usize) -> &[f64] {
        let w = self.d * self.q;
        &self.retained(i).z[node * w..(node + 1) * w]
    }

    pub fn y0(&self) -> &[f64] {
        self.y(0, 0)
    }

    pub fn ytilde0(&self) -> &[f64] {
        self.ytilde(0, 0)
    }

    pub fn z0(&self) -> &[f64] {
        self.z(0, 0)
    }

    /// Monte Carlo standard error of `Y_0` per component (zero on lattices).
    pub fn y0_stderr(&self) -> &[f64] {
        &self.y0_stderr
    }

    pub fn aggregates(&self) -> &[LevelAggregate] {
        &self.aggregates
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    /// `K_i = sum_{k <= i} dK_k` along the ancestry of `node`.
    pub fn cumulative_k(&self, scenario: &ScenarioSet, i: usize, node: usize) -> Vec<f64> {
        let mut k = vec![0.0; self.d];
        for level in 0..=i {
            let a = scenario.ancestor(i, node, level);
            for (acc, v) in k.iter_mut().zip(self.dk(level, a)) {
                *acc += v;
            }
        }
        k
    }

    pub fn max_picard_iterations(&self) -> usize {
        self.diagnostics.iter().map(|d| d.max_iterations).max().unwrap_or(0)
    }
}

/// Runs the scheme for `problem`.
pub fn solve(
    problem: &SwitchingProblem,
    grid: &TimeGrid,
    scenario: &ScenarioSet,
    weights: &WeightFamily,
    backend: &CondExpBackend,
    settings: &SolverSettings,
) -> Result<SchemeSolution> {
    if problem.brownian_dim != scenario.brownian_dim() || problem.state_dim != scenario.state_dim() {
        return Err(Error::invalid("problem dimensions do not match the scenario set"));
    }
    solve_generic(&ProblemInputs(problem), grid, scenario, weights, backend, settings)
}

/// Runs the generic scheme. `grid` must carry the scenario's dates; its
/// reflection flags may differ from the scenario grid's.
pub fn solve_generic<I: StepInputs + ?Sized>(
    inputs: &I,
    grid: &TimeGrid,
    scenario: &ScenarioSet,
    weights: &WeightFamily,
    backend: &CondExpBackend,
    settings: &SolverSettings,
) -> Result<SchemeSolution> {
    if !grid.same_dates(scenario.grid()) {
        return Err(Error::invalid("solver grid and scenario grid have different dates"));
    }
    if !std::ptr::eq(backend.scenario(), scenario) && backend.scenario().count(0) != scenario.count(0) {
        return Err(Error::invalid("backend is bound to a different scenario set"));
    }
    let n = grid.n();
    if weights.intervals() != n || weights.brownian_dim() != scenario.brownian_dim() {
        return Err(Error::invalid("weights do not match the scenario grid"));
    }
    if !(settings.tol > 0.0) {
        return Err(Error::invalid("Picard tolerance must be positive"));
    }
    let d = inputs.components();
    let q = scenario.brownian_dim();
    let l_y = inputs.lipschitz_y();
    if grid.modulus() * l_y >= 1.0 {
        warn!("h L^Y = {} >= 1: the implicit step may not contract", grid.modulus() * l_y);
    }
    if !weights.is_monotone_for(inputs.lipschitz_z()) {
        warn!(
            "sup h|H| L^Z = {} > 1: the scheme is not guaranteed to be monotone",
            weights.sup_scaled_weight() * inputs.lipschitz_z()
        );
    }

    let counts: Vec<usize> = (0..=n).map(|i| scenario.count(i)).collect();
    let mut levels: Vec<Option<LevelValues>> = vec![None; n + 1];
    let mut aggregates = vec![None; n + 1];
    let mut diagnostics = vec![None; n + 1];

    let leaves = counts[n];
    let mut xi = vec![0.0; leaves * d];
    xi.par_chunks_mut(d).enumerate().for_each(|(node, out)| {
        let v = inputs.terminal(node, scenario.state(n, node));
        out.copy_from_slice(&v);
    });
    aggregates[n] = Some(aggregate(&xi, &xi, &vec![0.0; xi.len()], d, scenario, n));
    diagnostics[n] = Some(StepDiagnostics {
        time_index: n,
        time: grid.time(n),
        reflection: grid.is_reflection(n),
        max_iterations: 0,
        max_first_residual: 0.0,
        projection_active: 0.0,
        max_domain_violation: None,
        membership_failures: 0,
    });
    let mut y0_stderr = vec![0.0; d];
    if settings.retention == Retention::Full {
        levels[n] = Some(LevelValues {
            ytilde: xi.clone(),
            y: xi.clone(),
            z: Vec::new(),
            dk: vec![0.0; leaves * d],
        });
    }
    let mut y_next = xi;

    for i in (0..n).rev() {
        if i == 0 && !scenario.is_lattice() {
            y0_stderr = aggregate(&y_next, &y_next, &[], d, scenario, 1).stderr_y;
        }
        let step = backward_step(inputs, scenario, weights, backend, i, &y_next, settings)?;
        let count = counts[i];
        let reflect = grid.is_reflection(i);
        let mut y = step.ytilde.clone();
        let mut dk = vec![0.0; count * d];
        let mut active = 0usize;
        let mut worst = f64::NEG_INFINITY;
        let mut failures = 0usize;
        if reflect {
            let per_node: Vec<Result<(bool, f64)>> = y
                .par_chunks_mut(d)
                .zip(dk.par_chunks_mut(d))
                .enumerate()
                .map(|(node, (yn, dkn))| {
                    let x = scenario.state(i, node);
                    let c = inputs.costs(i, node, x).map_err(|e| e.at_time(i))?;
                    let yt = &step.ytilde[node * d..(node + 1) * d];
                    c.project_into(yt, yn);
                    let mut moved = false;
                    for j in 0..d {
                        dkn[j] = yn[j] - yt[j];
                        moved |= dkn[j] > 0.0;
                    }
                    Ok((moved, domain_violation(&c, yn)))
                })
                .collect();
            for r in per_node {
                let (moved, v) = r?;
                active += moved as usize;
                worst = worst.max(v);
                failures += (v > DEFAULT_MEMBERSHIP_TOL) as usize;
            }
        }
        aggregates[i] = Some(aggregate(&y, &step.ytilde, &dk, d, scenario, i));
        diagnostics[i] = Some(StepDiagnostics {
            time_index: i,
            time: grid.time(i),
            reflection: reflect,
            max_iterations: step.max_iterations,
            max_first_residual: step.max_first_residual,
            projection_active: active as f64 / count as f64,
            max_domain_violation: reflect.then_some(worst),
            membership_failures: failures,
        });
        let keep = settings.retention == Retention::Full || i == 0;
        if keep {
            levels[i] = Some(LevelValues {
                ytilde: step.ytilde,
                y: y.clone(),
                z: step.z,
                dk,
            });
        }
        y_next = y;
    }

    Ok(SchemeSolution {
        grid: grid.clone(),
        d,
        q,
        counts,
        levels,
        aggregates: aggregates.into_iter().map(Option::unwrap).collect(),
        diagnostics: diagnostics.into_iter().map(Option::unwrap).collect(),
        y0_stderr,
    })
}

fn aggregate(y: &[f64], ytilde: &[f64], dk: &[f64], d: usize, scenario: &ScenarioSet, i: usize) -> LevelAggregate {
    let count = y.len() / d;
    let w = scenario.node_weight(i);
    let mean = |v: &[f64]| -> Vec<f64> {
        if v.is_empty() {
            return vec![0.0; d];
        }
        let mut m = vec![0.0; d];
        for row in v.chunks(d) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter().map(|s| s * w).collect()
    };
    let mean_y = mean(y);
    let mut var = vec![0.0; d];
    for row in y.chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean_y[j]).powi(2);
        }
    }
    let stderr_y = if count > 1 {
        var.iter()
            .map(|v| (v / (count as f64 - 1.0)).sqrt() / (count as f64).sqrt())
            .collect()
    } else {
        vec![0.0; d]
    };
    LevelAggregate {
        mean_y,
        stderr_y,
        mean_ytilde: mean(ytilde),
        mean_dk: mean(dk),
    }
}
