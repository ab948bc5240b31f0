//! Switching strategies on a scenario set, the switched backward scheme and
//! the Snell envelope checks relating it to the reflected scheme.
//!
//! A strategy started at `(i, j)` is a decision table: at every decision
//! level `k` and node, for every current mode, the mode to switch to (the
//! same mode means stay). Decisions are only allowed on reflection dates
//! after `i`, or from `i` on when initial switching is enabled. Several
//! switches may be chained at one node, up to a cap.
//!
//! For a strategy `a` with mode process `a_k` and cost `c_k` charged at
//! level `k`, the switched scheme reads
//!
//! ```text
//! U_n = xi^{a_n}
//! G_{k+1} = U_{k+1} - c_{k+1}
//! V_k = E[G_{k+1} H_k | F_k]
//! U_k = E[G_{k+1} | F_k] + h_k F_k^{a_k}(V_k)
//! ```
//!
//! where the driver of the reflected scheme is frozen at its solution `Yt_k`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::CondExpBackend;
use crate::error::{Error, Result};
use crate::forward::ScenarioSet;
use crate::model::TimeGrid;
use crate::scheme::{SchemeSolution, StepInputs};
use crate::weights::WeightFamily;

/// Largest number of strategies [`enumerate_strategies`] will produce.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;
/// Tolerance of the exact Snell checks.
pub const SNELL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    start_time: usize,
    start_mode: usize,
    d: usize,
    allow_initial_switch: bool,
    max_switches: usize,
    /// `decisions[k][node * d + mode]`; empty for levels that take no decision.
    decisions: Vec<Vec<u8>>,
}

impl Strategy {
    /// The never-switch strategy from `(start_time, start_mode)`.
    pub fn stay(grid: &TimeGrid, scenario: &ScenarioSet, start_time: usize, start_mode: usize, d: usize) -> Result<Self> {
        Self::stay_with(grid, scenario, start_time, start_mode, d, false)
    }

    pub fn stay_with(
        grid: &TimeGrid,
        scenario: &ScenarioSet,
        start_time: usize,
        start_mode: usize,
        d: usize,
        allow_initial_switch: bool,
    ) -> Result<Self> {
        if d == 0 || d > u8::MAX as usize {
            return Err(Error::invalid(format!("unsupported number of modes {d}")));
        }
        if start_time > grid.n() {
            return Err(Error::invalid(format!("start time index {start_time} is past the horizon")));
        }
        if start_mode >= d {
            return Err(Error::invalid(format!("start mode {} out of range 1..={d}", start_mode + 1)));
        }
        if !grid.same_dates(scenario.grid()) {
            return Err(Error::invalid("strategy grid and scenario grid have different dates"));
        }
        let decisions = (0..=grid.n())
            .map(|k| {
                if decision_level(grid, start_time, allow_initial_switch, k) {
                    (0..scenario.count(k) * d).map(|c| (c % d) as u8).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Ok(Self {
            start_time,
            start_mode,
            d,
            allow_initial_switch,
            max_switches: d - 1,
            decisions,
        })
    }

    pub fn start(&self) -> (usize, usize) {
        (self.start_time, self.start_mode)
    }

    pub fn modes(&self) -> usize {
        self.d
    }

    pub fn allows_initial_switch(&self) -> bool {
        self.allow_initial_switch
    }

    /// Cap on consecutive switches at one node.
    pub fn max_switches(&self) -> usize {
        self.max_switches
    }

    pub fn with_max_switches(mut self, cap: usize) -> Self {
        self.max_switches = cap;
        self
    }

    pub fn is_decision_level(&self, k: usize) -> bool {
        !self.decisions[k].is_empty()
    }

    pub fn decision(&self, k: usize, node: usize, mode: usize) -> usize {
        if self.decisions[k].is_empty() {
            mode
        } else {
            self.decisions[k][node * self.d + mode] as usize
        }
    }

    /// Sets the decision at `(k, node, mode)`. Switching outside the decision
    /// levels is rejected.
    pub fn set_decision(&mut self, k: usize, node: usize, mode: usize, target: usize) -> Result<()> {
        if mode >= self.d || target >= self.d {
            return Err(Error::invalid("mode out of range"));
        }
        if self.decisions[k].is_empty() {
            if target == mode {
                return Ok(());
            }
            return Err(Error::invalid(format!(
                "switch at time index {k}, which is not an admissible switching date"
            )));
        }
        let slot = node * self.d + mode;
        if slot >= self.decisions[k].len() {
            return Err(Error::invalid(format!("node {node} does not exist at time index {k}")));
        }
        self.decisions[k][slot] = target as u8;
        Ok(())
    }

    /// Modes after the decisions at `k` when entering with `mode`, with the
    /// switches made.
    fn apply(&self, k: usize, node: usize, mode: usize, switches: &mut Vec<(usize, usize)>) -> usize {
        let mut current = mode;
        if self.decisions[k].is_empty() {
            return current;
        }
        for _ in 0..self.max_switches {
            let next = self.decision(k, node, current);
            if next == current {
                break;
            }
            switches.push((current, next));
            current = next;
        }
        current
    }

    /// Modes `a_k`, switches and cumulative costs along the ancestry of
    /// `node` at level `level`, for `k` from the start date to `level`.
    pub fn realize<I: StepInputs + ?Sized>(
        &self,
        inputs: &I,
        scenario: &ScenarioSet,
        level: usize,
        node: usize,
    ) -> Result<Realization> {
        if level < self.start_time {
            return Err(Error::invalid("realization level precedes the start date"));
        }
        let mut mode = self.start_mode;
        let mut modes = Vec::new();
        let mut cumulative = Vec::new();
        let mut switches = Vec::new();
        let mut total = 0.0;
        for k in self.start_time..=level {
            let a = scenario.ancestor(level, node, k);
            let mut chain = Vec::new();
            mode = self.apply(k, a, mode, &mut chain);
            if !chain.is_empty() {
                let c = inputs.costs(k, a, scenario.state(k, a))?;
                for (from, to) in chain {
                    let cost = c.get(from, to);
                    total += cost;
                    switches.push(Switch {
                        time_index: k,
                        from,
                        to,
                        cost,
                    });
                }
            }
            modes.push(mode);
            cumulative.push(total);
        }
        Ok(Realization {
            start_time: self.start_time,
            modes,
            cumulative_cost: cumulative,
            switches,
        })
    }
}

fn decision_level(grid: &TimeGrid, start: usize, initial: bool, k: usize) -> bool {
    grid.is_reflection(k) && (k > start || (initial && k == start))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Switch {
    pub time_index: usize,
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Path-wise view of a strategy along one scenario branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub start_time: usize,
    /// `a_k` for `k = start_time ..`.
    pub modes: Vec<usize>,
    /// `A_k` for `k = start_time ..`.
    pub cumulative_cost: Vec<f64>,
    /// `(theta_r, alpha_{r-1} -> alpha_r)` for `r >= 1`.
    pub switches: Vec<Switch>,
}

impl Realization {
    /// `N^a`.
    pub fn switch_count(&self) -> usize {
        self.switches.len()
    }
}

/// Solution `(U, V)` of the switched scheme for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedValue {
    pub start_time: usize,
    /// `u[k][node]` for `k >= start_time`; earlier levels are empty.
    pub u: Vec<Vec<f64>>,
    /// `v[k][node * q + l]` for `start_time <= k < n`.
    pub v: Vec<Vec<f64>>,
    /// Cost charged at the start date (zero unless initial switching is allowed).
    pub initial_cost: Vec<f64>,
    /// Monte Carlo standard error of `U` at the start date (zero on lattices).
    pub stderr: f64,
}

impl SwitchedValue {
    /// Strategy value at `node` of the start level, net of any switching cost
    /// paid at the start date.
    pub fn value(&self, node: usize) -> f64 {
        self.u[self.start_time][node] - self.initial_cost[node]
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.initial_cost.len()).map(|p| self.value(p)).collect()
    }
}

/// Evaluates the switched scheme. `solution` supplies the frozen `Yt` fed
/// to the driver and must retain every level from the start date; without
/// it the driver sees `y = 0`.
pub fn evaluate_switched<I: StepInputs + ?Sized>(
    inputs: &I,
    solution: Option<&SchemeSolution>,
    scenario: &ScenarioSet,
    weights: &WeightFamily,
    backend: &CondExpBackend,
    strategy: &Strategy,
) -> Result<SwitchedValue> {
    let grid = scenario.grid();
    let n = grid.n();
    let d = inputs.components();
    let q = scenario.brownian_dim();
    let start = strategy.start_time;
    if strategy.d != d || strategy.decisions.len() != n + 1 {
        return Err(Error::invalid("strategy does not match the problem or scenario"));
    }
    if let Some(sol) = solution {
        if sol.components() != d || (start..=n).any(|k| sol.level(k).is_none()) {
            return Err(Error::invalid("the frozen solution must retain every level from the start date"));
        }
    }

    // Forward pass: mode entering each level, mode after decisions, cost charged.
    let mut mode_after: Vec<Vec<u8>> = vec![Vec::new(); n + 1];
    let mut charged: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    for k in start..=n {
        let count = scenario.count(k);
        let mut modes = vec![0u8; count];
        let mut costs = vec![0.0; count];
        let results: Vec<Result<()>> = modes
            .par_iter_mut()
            .zip(costs.par_iter_mut())
            .enumerate()
            .map(|(node, (m, c))| {
                let entering = if k == start {
                    strategy.start_mode
                } else {
                    mode_after[k - 1][scenario.ancestor(k, node, k - 1)] as usize
                };
                let mut chain = Vec::new();
                let out = strategy.apply(k, node, entering, &mut chain);
                if !chain.is_empty() {
                    let matrix = inputs.costs(k, node, scenario.state(k, node))?;
                    *c = chain.iter().map(|&(a, b)| matrix.get(a, b)).sum();
                }
                *m = out as u8;
                Ok(())
            })
            .collect();
        for r in results {
            r.map_err(|e| e.at_time(k))?;
        }
        mode_after[k] = modes;
        charged[k] = costs;
    }

    let mut u: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    u[n] = (0..scenario.count(n))
        .into_par_iter()
        .map(|node| inputs.terminal(node, scenario.state(n, node))[mode_after[n][node] as usize])
        .collect();
    let mut stderr = 0.0;
    for k in (start..n).rev() {
        let h = grid.step(k);
        let children = scenario.count(k + 1);
        let cols = 1 + q;
        let mut targets = vec![0.0; children * cols];
        targets.par_chunks_mut(cols).enumerate().for_each(|(c, row)| {
            let g = u[k + 1][c] - charged[k + 1][c];
            row[0] = g;
            for (l, w) in weights.row(k, c).iter().enumerate() {
                row[1 + l] = g * w;
            }
        });
        if k == start && !scenario.is_lattice() {
            let gs: Vec<f64> = targets.chunks(cols).map(|r| r[0]).collect();
            let mean = gs.iter().sum::<f64>() / children as f64;
            let var = gs.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (children as f64 - 1.0).max(1.0);
            stderr = (var / children as f64).sqrt();
        }
        let fitted = backend.condexp(k, &targets, cols)?;
        let count = scenario.count(k);
        let mut uk = vec![0.0; count];
        uk.par_iter_mut().enumerate().for_each(|(node, out)| {
            let row = &fitted[node * cols..(node + 1) * cols];
            let mode = mode_after[k][node] as usize;
            let x = scenario.state(k, node);
            let zero = vec![0.0; d];
            let y = solution.map(|s| s.ytilde(k, node)).unwrap_or(&zero);
            *out = row[0] + h * inputs.driver(k, node, x, mode, y, &row[1..]);
        });
        v[k] = fitted
            .chunks(cols)
            .flat_map(|row| row[1..].iter().copied())
            .collect();
        u[k] = uk;
    }
    let initial_cost = charged[start].clone();
    Ok(SwitchedValue {
        start_time: start,
        u,
        v,
        initial_cost,
        stderr,
    })
}

/// The optimal strategy read off the reflected scheme: on a decision level,
/// leave mode `a` when `Yt^a <= max_{m != a} (Yt^m - C^{am})`, for the
/// smallest maximizing `m`.
pub fn extract_optimal_strategy<I: StepInputs + ?Sized>(
    inputs: &I,
    solution: &SchemeSolution,
    scenario: &ScenarioSet,
    start_time: usize,
    start_mode: usize,
    allow_initial_switch: bool,
) -> Result<Strategy> {
    let d = inputs.components();
    let mut strategy = Strategy::stay_with(solution.grid(), scenario, start_time, start_mode, d, allow_initial_switch)?;
    for k in start_time..=solution.grid().n() {
        if !strategy.is_decision_level(k) {
            continue;
        }
        if solution.level(k).is_none() {
            return Err(Error::invalid("extraction needs a solution with every level retained"));
        }
        let table: Vec<Result<Vec<u8>>> = (0..scenario.count(k))
            .into_par_iter()
            .map(|node| {
                let yt = solution.ytilde(k, node);
                let c = inputs.costs(k, node, scenario.state(k, node))?;
                Ok((0..d)
                    .map(|mode| match c.best_switch(yt, mode) {
                        Some((m, best)) if yt[mode] <= best => m as u8,
                        _ => mode as u8,
                    })
                    .collect())
            })
            .collect();
        let mut flat = Vec::with_capacity(scenario.count(k) * d);
        for row in table {
            flat.extend(row.map_err(|e| e.at_time(k))?);
        }
        strategy.decisions[k] = flat;
    }
    Ok(strategy)
}

/// Number of strategies [`enumerate_strategies`] yields for this start.
pub fn strategy_count(grid: &TimeGrid, scenario: &ScenarioSet, start_time: usize, d: usize, allow_initial_switch: bool, max_switches: usize) -> u128 {
    if max_switches == 0 {
        return 1;
    }
    let slots: u32 = (start_time..=grid.n())
        .filter(|&k| decision_level(grid, start_time, allow_initial_switch, k))
        .map(|k| (scenario.count(k) * d) as u32)
        .sum();
    (d as u128).checked_pow(slots).unwrap_or(u128::MAX)
}

/// Every adapted admissible strategy from `(start_time, start_mode)`, as a
/// full decision table with chains capped at `max_switches`.
pub fn enumerate_strategies(
    grid: &TimeGrid,
    scenario: &ScenarioSet,
    start_time: usize,
    start_mode: usize,
    d: usize,
    max_switches: usize,
    allow_initial_switch: bool,
) -> Result<StrategyEnumeration> {
    let count = strategy_count(grid, scenario, start_time, d, allow_initial_switch, max_switches);
    if count > ENUMERATION_BUDGET {
        return Err(Error::Capacity {
            what: "enumerated strategies",
            requested: count,
            budget: ENUMERATION_BUDGET,
        });
    }
    let base = Strategy::stay_with(grid, scenario, start_time, start_mode, d, allow_initial_switch)?
        .with_max_switches(max_switches);
    let slots = if max_switches == 0 {
        Vec::new()
    } else {
        (0..=grid.n())
            .filter(|&k| base.is_decision_level(k))
            .flat_map(|k| (0..base.decisions[k].len()).map(move |s| (k, s)))
            .collect()
    };
    Ok(StrategyEnumeration {
        base,
        counter: Some(vec![0; slots.len()]),
        slots,
        started: false,
    })
}

/// Mixed-radix walk over all decision tables.
pub struct StrategyEnumeration {
    base: Strategy,
    slots: Vec<(usize, usize)>,
    /// Offsets in `0..d` per slot, added to the stay decision; `None` once exhausted.
    counter: Option<Vec<u8>>,
    started: bool,
}

impl Iterator for StrategyEnumeration {
    type Item = Strategy;

    fn next(&mut self) -> Option<Strategy> {
        let counter = self.counter.as_mut()?;
        if !self.started {
            self.started = true;
        } else {
            let d = self.base.d as u8;
            let mut carry = true;
            for c in counter.iter_mut() {
                *c += 1;
                if *c < d {
                    carry = false;
                    break;
                }
                *c = 0;
            }
            if carry {
                self.counter = None;
                return None;
            }
        }
        let counter = self.counter.as_ref()?;
        let mut s = self.base.clone();
        let d = s.d;
        for (&(k, slot), &off) in self.slots.iter().zip(counter) {
            let mode = slot % d;
            s.decisions[k][slot] = ((mode + off as usize) % d) as u8;
        }
        Some(s)
    }
}

/// A random admissible strategy: on each decision slot, switch with
/// probability `switch_probability` to a uniformly chosen other mode.
pub fn random_strategy(
    grid: &TimeGrid,
    scenario: &ScenarioSet,
    start_time: usize,
    start_mode: usize,
    d: usize,
    switch_probability: f64,
    rng: &mut impl Rng,
) -> Result<Strategy> {
    let mut s = Strategy::stay(grid, scenario, start_time, start_mode, d)?;
    if d < 2 {
        return Ok(s);
    }
    for table in s.decisions.iter_mut() {
        for (slot, entry) in table.iter_mut().enumerate() {
            if rng.random::<f64>() < switch_probability {
                let mode = slot % d;
                let other = rng.random_range(0..d - 1);
                *entry = if other >= mode { other + 1 } else { other } as u8;
            }
        }
    }
    Ok(s)
}

/// Outcome of the Snell envelope checks at one start `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnellReport {
    pub time_index: usize,
    /// One-based mode.
    pub mode: usize,
    pub exact_backend: bool,
    pub strategies_checked: usize,
    pub enumerated: bool,
    /// `min over strategies and nodes of Yt^j - U^a`.
    pub min_domination_margin: f64,
    /// Allowed negative margin: `1e-10`, or 3 standard errors on ensembles.
    pub domination_tolerance: f64,
    /// `max over nodes |Yt^j - U^{extracted}|`; exact backends only.
    pub optimality_gap: Option<f64>,
    /// `max over nodes |Yt^j - max_a U^a|`; enumerated exact runs only.
    pub enumeration_gap: Option<f64>,
    pub passed: bool,
}

/// Settings for [`snell_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnellSettings {
    /// Random strategies to draw when enumeration is infeasible or disabled.
    pub sample: usize,
    pub seed: u64,
    pub switch_probability: f64,
    /// Try exhaustive enumeration first.
    pub enumerate: bool,
    pub max_switches: usize,
}

impl SnellSettings {
    pub fn new(d: usize) -> Self {
        Self {
            sample: 1000,
            seed: 0,
            switch_probability: 0.3,
            enumerate: true,
            max_switches: d.saturating_sub(1),
        }
    }
}

/// Checks domination by every enumerated (or sampled) strategy and, on
/// exact backends, optimality of the extracted strategy.
pub fn snell_check<I: StepInputs + ?Sized>(
    inputs: &I,
    solution: &SchemeSolution,
    scenario: &ScenarioSet,
    weights: &WeightFamily,
    backend: &CondExpBackend,
    start_time: usize,
    start_mode: usize,
    settings: &SnellSettings,
) -> Result<SnellReport> {
    let grid = solution.grid();
    let d = inputs.components();
    let exact = backend.is_exact();
    let count = scenario.count(start_time);
    let target: Vec<f64> = (0..count).map(|p| solution.ytilde(start_time, p)[start_mode]).collect();
    let target_se = if exact {
        0.0
    } else {
        solution.aggregates()[start_time.min(grid.n())].stderr_y[start_mode]
    };

    let mut min_margin = f64::INFINITY;
    let mut worst_tolerance = if exact { SNELL_TOL } else { 0.0 };
    let mut best = vec![f64::NEG_INFINITY; count];
    let mut checked = 0usize;
    let mut visit = |value: &SwitchedValue| {
        checked += 1;
        for p in 0..count {
            let u = value.value(p);
            min_margin = min_margin.min(target[p] - u);
            best[p] = best[p].max(u);
        }
        if !exact {
            let tol = 3.0 * (value.stderr.powi(2) + target_se.powi(2)).sqrt();
            worst_tolerance = worst_tolerance.max(tol);
        }
    };

    let feasible = settings.enumerate
        && strategy_count(grid, scenario, start_time, d, false, settings.max_switches) <= ENUMERATION_BUDGET;
    if feasible {
        let all: Vec<Strategy> =
            enumerate_strategies(grid, scenario, start_time, start_mode, d, settings.max_switches, false)?.collect();
        let values: Vec<Result<SwitchedValue>> = all
            .par_iter()
            .map(|s| evaluate_switched(inputs, Some(solution), scenario, weights, backend, s))
            .collect();
        for v in values {
            visit(&v?);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let all: Vec<Strategy> = (0..settings.sample)
            .map(|_| random_strategy(grid, scenario, start_time, start_mode, d, settings.switch_probability, &mut rng))
            .collect::<Result<_>>()?;
        let values: Vec<Result<SwitchedValue>> = all
            .par_iter()
            .map(|s| evaluate_switched(inputs, Some(solution), scenario, weights, backend, s))
            .collect();
        for v in values {
            visit(&v?);
        }
    }

    let extracted = extract_optimal_strategy(inputs, solution, scenario, start_time, start_mode, false)?;
    let ext_value = evaluate_switched(inputs, Some(solution), scenario, weights, backend, &extracted)?;
    visit(&ext_value);
    let optimality_gap = exact.then(|| {
        (0..count)
            .map(|p| (target[p] - ext_value.value(p)).abs())
            .fold(0.0, f64::max)
    });
    let enumeration_gap = (exact && feasible).then(|| {
        (0..count)
            .map(|p| (target[p] - best[p]).abs())
            .fold(0.0, f64::max)
    });
    let passed = min_margin >= -worst_tolerance
        && optimality_gap.is_none_or(|g| g <= SNELL_TOL)
        && enumeration_gap.is_none_or(|g| g <= SNELL_TOL);
    Ok(SnellReport {
        time_index: start_time,
        mode: start_mode + 1,
        exact_backend: exact,
        strategies_checked: checked,
        enumerated: feasible,
        min_domination_margin: min_margin,
        domination_tolerance: worst_tolerance,
        optimality_gap,
        enumeration_gap,
        passed,
    })
}

/// Writes the decision table as CSV: `time_index,node,mode,decision` with
/// one-based modes, one row per decision slot.
pub fn write_strategy_csv(strategy: &Strategy, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    w.write_record(["time_index", "node", "mode", "decision"])?;
    let d = strategy.d;
    for (k, table) in strategy.decisions.iter().enumerate() {
        for (slot, &target) in table.iter().enumerate() {
            w.write_record([
                k.to_string(),
                (slot / d).to_string(),
                (slot % d + 1).to_string(),
                (target as usize + 1).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
