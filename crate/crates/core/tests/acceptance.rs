//! Acceptance gate: one check per criterion, each printing a PASS/FAIL line.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use orbsde::condexp::{BackendKind, CondExpBackend};
use orbsde::forward::{build_lattice, simulate_euler, ScenarioSet};
use orbsde::harness::config::ProblemConfig;
use orbsde::harness::convergence::{run_convergence, Reference};
use orbsde::harness::experiments::{perturbation_study, reflection_refinement, reflection_error_scale};
use orbsde::harness::expr::{parse_expression, parse_in_scope, BinOp, Expr, Func, Scope, Var, VarKind};
use orbsde::model::{SwitchingProblem, TimeGrid, Violation};
use orbsde::projection::{in_domain, project, CostMatrix};
use orbsde::scheme::{
    picard_iteration_bound, picard_solve, solve, solve_generic, Perturbation, Perturbed, ProblemInputs, Retention,
    SchemeSolution, SolverSettings,
};
use orbsde::switching::{enumerate_strategies, evaluate_switched, extract_optimal_strategy, random_strategy, Strategy};
use orbsde::weights::{check_moments, rademacher_weights, truncated_gaussian_weights, weights_for, MomentTolerance};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random structural cost matrix: shortest-path closure of random positive
/// weights plus a constant, so every triangle margin is at least `delta`.
fn random_structural_costs(d: usize, rng: &mut impl Rng) -> CostMatrix {
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if i != j {
                w[i * d + j] = rng.random_range(0.05..2.0);
            }
        }
    }
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                let via = w[i * d + k] + w[k * d + j];
                if via < w[i * d + j] {
                    w[i * d + j] = via;
                }
            }
        }
    }
    let delta = rng.random_range(0.01..0.3);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                w[i * d + j] += delta;
            }
        }
    }
    CostMatrix::new(d, w).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Projection suite

fn criterion_projection() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances = 12_000;
    let mut worst_idem = 0.0f64;
    for k in 0..instances {
        let d = [2, 3, 5][k % 3];
        let c = random_structural_costs(d, &mut rng);
        ensure(c.is_structural(), format!("generator produced a non-structural matrix at instance {k}"))?;
        let scale = [0.1, 1.0, 10.0][k % 3];
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let p = project(&c, &y).unwrap();
        ensure(p.iter().zip(&y).all(|(a, b)| a >= b), format!("dominance fails at instance {k}"))?;
        ensure(in_domain(&c, &p, 1e-10).unwrap(), format!("projection outside the domain at instance {k}"))?;
        let pp = project(&c, &p).unwrap();
        worst_idem = worst_idem.max(sup_diff(&pp, &p));
        ensure(sup_diff(&pp, &p) <= 1e-12, format!("idempotence fails at instance {k}"))?;

        let up: Vec<f64> = y.iter().map(|v| v + rng.random_range(0.0..scale)).collect();
        let pu = project(&c, &up).unwrap();
        ensure(p.iter().zip(&pu).all(|(a, b)| a <= b), format!("monotonicity fails at instance {k}"))?;

        let other: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let po = project(&c, &other).unwrap();
        let lhs = sup_diff(&p, &po);
        let rhs = sup_diff(&y, &other);
        ensure(lhs <= rhs * (1.0 + 1e-15) + 1e-15, format!("1-Lipschitz fails at instance {k}: {lhs} > {rhs}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, format!("runtime {secs:.2}s exceeds 5s"))?;
    Ok(format!("{instances} instances, worst idempotence {worst_idem:e}, {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// 2. Snell oracle

fn benchmark_problem() -> SwitchingProblem {
    SwitchingProblem::builder(1, 1, 2)
        .x0(vec![0.0])
        .diffusion(|_, out| out[0] = 1.0)
        .driver(0, |x, y, z| x[0] - 0.5 * y[0] + 0.3 * z[0])
        .driver(1, |x, _y, z| -x[0] + 0.2 * z[0].abs())
        .terminal(0, |x| 0.1 * x[0].clamp(-1.0, 1.0))
        .terminal(1, |x| -0.1 * x[0].clamp(-1.0, 1.0))
        .constant_costs(&CostMatrix::from_rows(&[vec![0.0, 0.3], vec![0.2, 0.0]]).unwrap())
        .lipschitz(0.5, 0.3)
        .build()
        .unwrap()
}

struct LatticeRun {
    problem: SwitchingProblem,
    grid: TimeGrid,
    scenario: ScenarioSet,
}

impl LatticeRun {
    fn new(problem: SwitchingProblem, n: usize) -> Self {
        let grid = TimeGrid::uniform(n, problem.horizon).unwrap();
        let scenario = ScenarioSet::Lattice(build_lattice(&problem, &grid).unwrap());
        Self { problem, grid, scenario }
    }

    fn solve(&self) -> SchemeSolution {
        let weights = weights_for(&self.scenario, 1.0);
        let backend = CondExpBackend::bind(BackendKind::ExactLattice, &self.scenario).unwrap();
        solve(&self.problem, &self.grid, &self.scenario, &weights, &backend, &SolverSettings::default()).unwrap()
    }
}

/// Switched value at the root computed directly on the binary tree (q = 1)
/// from the strategy's realized modes and costs, independently of the
/// library's switched scheme.
fn tree_switched_value(run: &LatticeRun, sol: &SchemeSolution, strategy: &Strategy) -> f64 {
    let n = run.grid.n();
    let sc = &run.scenario;
    let inputs = ProblemInputs(&run.problem);
    let leaves = sc.count(n);
    let realizations: Vec<_> = (0..leaves).map(|leaf| strategy.realize(&inputs, sc, n, leaf).unwrap()).collect();
    let mode_at = |k: usize, node: usize| realizations[node << (n - k)].modes[k];
    let charge_at = |k: usize, node: usize| {
        let r = &realizations[node << (n - k)];
        r.switches.iter().filter(|s| s.time_index == k).map(|s| s.cost).sum::<f64>()
    };
    let mut u: Vec<f64> = (0..leaves)
        .map(|leaf| run.problem.terminal(sc.state(n, leaf))[mode_at(n, leaf)])
        .collect();
    for k in (0..n).rev() {
        let h = run.grid.step(k);
        u = (0..sc.count(k))
            .map(|p| {
                let mut mean = 0.0;
                let mut zed = 0.0;
                for child in [2 * p, 2 * p + 1] {
                    let gamma = u[child] - charge_at(k + 1, child);
                    let dw = sc.increment_coord(k, child, 0);
                    mean += 0.5 * gamma;
                    zed += 0.5 * gamma * dw / h;
                }
                let mode = mode_at(k, p);
                let y = sol.ytilde(k, p);
                mean + h * run.problem.driver(mode, sc.state(k, p), y, &[zed])
            })
            .collect();
    }
    u[0] - charge_at(0, 0)
}

fn criterion_snell() -> Check {
    let started = Instant::now();
    let small = LatticeRun::new(benchmark_problem(), 2);
    let sol = small.solve();
    let inputs = ProblemInputs(&small.problem);
    let weights = weights_for(&small.scenario, 1.0);
    let backend = CondExpBackend::bind(BackendKind::ExactLattice, &small.scenario).unwrap();
    let mut worst_enum = 0.0f64;
    let mut worst_agreement = 0.0f64;
    let mut enumerated = 0;
    for j in 0..2 {
        let mut best = f64::NEG_INFINITY;
        for s in enumerate_strategies(&small.grid, &small.scenario, 0, j, 2, 1, false).unwrap() {
            let direct = tree_switched_value(&small, &sol, &s);
            let lib = evaluate_switched(&inputs, Some(&sol), &small.scenario, &weights, &backend, &s).unwrap();
            worst_agreement = worst_agreement.max((lib.value(0) - direct).abs());
            best = best.max(direct);
            enumerated += 1;
        }
        let gap = (sol.ytilde0()[j] - best).abs();
        worst_enum = worst_enum.max(gap);
        ensure(gap <= 1e-10, format!("n=2 mode {}: |Yt_0 - max U| = {gap:e}", j + 1))?;
    }
    ensure(worst_agreement <= 1e-12, format!("switched scheme disagrees with tree recursion by {worst_agreement:e}"))?;

    let big = LatticeRun::new(benchmark_problem(), 4);
    let sol4 = big.solve();
    let inputs4 = ProblemInputs(&big.problem);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_ext = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    for j in 0..2 {
        let target = sol4.ytilde0()[j];
        let ext = extract_optimal_strategy(&inputs4, &sol4, &big.scenario, 0, j, false).unwrap();
        let gap = (tree_switched_value(&big, &sol4, &ext) - target).abs();
        worst_ext = worst_ext.max(gap);
        ensure(gap <= 1e-10, format!("n=4 mode {}: extracted strategy misses Yt_0 by {gap:e}", j + 1))?;
        for _ in 0..1000 {
            let s = random_strategy(&big.grid, &big.scenario, 0, j, 2, 0.3, &mut rng).unwrap();
            let excess = tree_switched_value(&big, &sol4, &s) - target;
            worst_excess = worst_excess.max(excess);
            ensure(excess <= 1e-10, format!("n=4 mode {}: random strategy beats Yt_0 by {excess:e}", j + 1))?;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("runtime {secs:.2}s exceeds 30s"))?;
    Ok(format!(
        "{enumerated} enumerated strategies, enumeration gap {worst_enum:e}, extracted gap {worst_ext:e}, \
         worst random excess {worst_excess:e}, {secs:.2}s"
    ))
}

// ---------------------------------------------------------------------------
// 3. Martingale exactness

fn criterion_martingale() -> Check {
    let b = 0.1;
    let sigma = |x: f64| 1.0 + 0.2 * x.sin();
    let problem = SwitchingProblem::builder(1, 1, 2)
        .x0(vec![0.3])
        .drift(move |_, out| out[0] = b)
        .diffusion(move |x, out| out[0] = sigma(x[0]))
        .terminal(0, |x| x[0] * x[0])
        .terminal(1, |x| x[0] * x[0])
        .constant_costs(&CostMatrix::constant(2, 0.5))
        .lipschitz(0.01, 0.01)
        .build()
        .unwrap();
    let n = 8;
    let run = LatticeRun::new(problem, n);
    let sol = run.solve();
    // Euler recursion over all 2^n sign sequences.
    let h = 1.0 / n as f64;
    let mut expected = 0.0;
    for signs in 0..(1u32 << n) {
        let mut x: f64 = 0.3;
        for k in 0..n {
            let s = if signs >> k & 1 == 1 { 1.0 } else { -1.0 };
            x = x + b * h + sigma(x) * s * h.sqrt();
        }
        expected += x * x;
    }
    expected /= (1u32 << n) as f64;
    let err = sup_diff(sol.y0(), &[expected, expected]);
    ensure(err <= 1e-12, format!("lattice Y_0 error {err:e}"))?;
    let mut max_dk = 0.0f64;
    for i in 0..=n {
        for node in 0..run.scenario.count(i) {
            max_dk = max_dk.max(sol.dk(i, node).iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
    }
    ensure(max_dk == 0.0, format!("lattice dK reaches {max_dk:e}"))?;

    // Regression: X_T ~ N(x0 + bT, T), g = x^2.
    let problem = SwitchingProblem::builder(1, 1, 2)
        .x0(vec![0.5])
        .drift(move |_, out| out[0] = b)
        .diffusion(|_, out| out[0] = 1.0)
        .terminal(0, |x| x[0] * x[0])
        .terminal(1, |x| x[0] * x[0])
        .constant_costs(&CostMatrix::constant(2, 0.5))
        .lipschitz(0.01, 0.01)
        .build()
        .unwrap();
    let grid = TimeGrid::uniform(n, 1.0).unwrap();
    let paths = 100_000;
    let ens = simulate_euler(&problem, &grid, paths, 31).unwrap();
    let weights = truncated_gaussian_weights(&ens, 100.0);
    let gs: Vec<f64> = (0..paths).map(|p| ens.state(n, p)[0].powi(2)).collect();
    let scenario = ScenarioSet::Paths(ens);
    let backend = CondExpBackend::bind(BackendKind::least_squares_default(), &scenario).unwrap();
    let settings = SolverSettings {
        retention: Retention::Summary,
        ..SolverSettings::default()
    };
    let sol = solve(&problem, &grid, &scenario, &weights, &backend, &settings).unwrap();
    let mean = gs.iter().sum::<f64>() / paths as f64;
    let sd = (gs.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (paths as f64 - 1.0)).sqrt();
    let se = sd / (paths as f64).sqrt();
    let exact = 0.6f64.powi(2) + 1.0;
    let dev = sup_diff(sol.y0(), &[exact, exact]);
    ensure(dev <= 3.0 * se, format!("regression Y_0 deviates by {dev:e} > 3 SE = {:e}", 3.0 * se))?;
    let reg_dk = sol
        .aggregates()
        .iter()
        .flat_map(|a| a.mean_dk.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    ensure(reg_dk == 0.0, format!("regression dK reaches {reg_dk:e}"))?;
    Ok(format!(
        "lattice error {err:e}, max |dK| {max_dk:e}; regression deviation {dev:.3e} vs 3 SE {:.3e}",
        3.0 * se
    ))
}

// ---------------------------------------------------------------------------
// 4. Weight moments

fn criterion_weights() -> Check {
    let mut lattice_margin = f64::INFINITY;
    for (q, n) in [(1, 4), (1, 16), (2, 4)] {
        let problem = SwitchingProblem::builder(1, q, 1)
            .diffusion(|_, out| out.fill(1.0))
            .constant_costs(&CostMatrix::constant(1, 0.0))
            .lipschitz(0.1, 0.1)
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(n, 1.0).unwrap();
        let lat = build_lattice(&problem, &grid).unwrap();
        let w = rademacher_weights(&lat);
        let report = check_moments(&w, &ScenarioSet::Lattice(lat), 1.0, MomentTolerance::Absolute(0.0));
        ensure(report.passed(), format!("lattice q={q} n={n}: {report}"))?;
        lattice_margin = lattice_margin.min(report.min_margin);
    }
    ensure(lattice_margin >= 0.0, "lattice margin negative")?;

    let problem = SwitchingProblem::builder(1, 1, 1)
        .diffusion(|_, out| out[0] = 1.0)
        .constant_costs(&CostMatrix::constant(1, 0.0))
        .lipschitz(0.1, 0.1)
        .build()
        .unwrap();
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let ens = simulate_euler(&problem, &grid, 1_000_000, 5).unwrap();
    let r = 0.5;
    let w = truncated_gaussian_weights(&ens, r);
    let scenario = ScenarioSet::Paths(ens);
    let report = check_moments(&w, &scenario, 1.0 / r, MomentTolerance::StandardErrors(5.0));
    ensure(report.passed(), format!("truncated Gaussian moments: {report}"))?;
    let mut sup = 0.0f64;
    for i in 0..4 {
        let cap = r / grid.step(i);
        for p in 0..1_000_000 {
            let v = w.value(i, p, 0).abs();
            sup = sup.max(v * grid.step(i) / r);
            ensure(v <= cap, format!("|H| = {v} exceeds R/h = {cap} on interval {i}"))?;
        }
    }
    let flagged = check_moments(&w, &scenario, 1.5 / r, MomentTolerance::StandardErrors(5.0));
    ensure(
        flagged.violations.iter().any(|v| matches!(v, Violation::WeightBound { .. })),
        "R L^Z = 1.5 was not flagged",
    )?;
    Ok(format!(
        "lattice min margin {lattice_margin}, truncated min margin {:.3e}, max h|H|/R = {sup}, R L^Z > 1 flagged",
        report.min_margin
    ))
}

// ---------------------------------------------------------------------------
// 5. Implicit step

fn criterion_picard() -> Check {
    let tol = 1e-12;
    let o = picard_solve(&[1.0], 0.5, tol, 200, |y, out| out[0] = y[0]).map_err(|e| e.to_string())?;
    let err = (o.value[0] - 2.0).abs();
    ensure(err <= 1e-12, format!("affine fixed point off by {err:e}"))?;
    let bound = picard_iteration_bound(tol, 0.5, o.first_residual);
    ensure(o.iterations <= bound, format!("affine: {} iterations > bound {bound}", o.iterations))?;

    // Full solves: per-step counts against the bound from h L^Y.
    let mut checked = 0;
    let nonlinear = SwitchingProblem::builder(1, 1, 2)
        .diffusion(|_, out| out[0] = 1.0)
        .driver(0, |x, y, _| 0.9 * y[0].sin() + x[0])
        .driver(1, |_, y, z| 0.9 * y[1].cos() - 0.2 * z[0])
        .terminal(0, |x| x[0])
        .terminal(1, |x| 1.0 - x[0])
        .constant_costs(&CostMatrix::constant(2, 0.4))
        .lipschitz(0.9, 0.2)
        .build()
        .unwrap();
    for (problem, n) in [(benchmark_problem(), 4), (nonlinear, 2), (benchmark_problem(), 8)] {
        let l_y = problem.lipschitz_y;
        let run = LatticeRun::new(problem, n);
        let sol = run.solve();
        for diag in sol.diagnostics().iter().filter(|d| d.time_index < n) {
            let rho = run.grid.step(diag.time_index) * l_y;
            let bound = picard_iteration_bound(tol, rho, diag.max_first_residual);
            ensure(
                diag.max_iterations <= bound,
                format!("n={n} step {}: {} iterations > bound {bound}", diag.time_index, diag.max_iterations),
            )?;
            checked += 1;
        }
    }
    Ok(format!("fixed point error {err:e}, {} iterations (bound {bound}), {checked} solver steps within bound", o.iterations))
}

// ---------------------------------------------------------------------------
// 6. Comparison

fn random_lattice_problem(rng: &mut impl Rng) -> (SwitchingProblem, usize) {
    let d = rng.random_range(2..=3usize);
    let n = rng.random_range(2..=4usize);
    let drift = rng.random_range(-0.3..0.3);
    let vol = rng.random_range(0.5..1.5);
    let costs = random_structural_costs(d, rng);
    let mut builder = SwitchingProblem::builder(1, 1, d)
        .x0(vec![rng.random_range(-1.0..1.0)])
        .drift(move |_, out| out[0] = drift)
        .diffusion(move |x, out| out[0] = vol + 0.2 * x[0].cos())
        .constant_costs(&costs);
    let mut l_y = 0.0f64;
    let mut l_z = 0.0f64;
    for j in 0..d {
        let alpha = rng.random_range(-1.0..1.0);
        let beta: f64 = rng.random_range(-0.5..0.5);
        let coop = rng.random_range(0.0..0.3);
        let gamma: f64 = rng.random_range(-0.7..0.7);
        l_y = l_y.max(beta.abs() + coop);
        l_z = l_z.max(gamma.abs() + 0.2);
        builder = builder.driver(j, move |x, y, z| {
            let others: f64 = (0..y.len()).filter(|&k| k != j).map(|k| y[k]).sum::<f64>() / (y.len() - 1) as f64;
            alpha * x[0].sin() + beta * y[j] + coop * others + gamma * z[0] + 0.2 * z[0].abs()
        });
        let level = rng.random_range(-0.5..0.5);
        let slope = rng.random_range(-1.0..1.0);
        builder = builder.terminal(j, move |x| level + slope * x[0].tanh());
    }
    (builder.lipschitz(l_y, l_z).build().unwrap(), n)
}

fn criterion_comparison() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let instances = 24;
    let mut worst_cost = f64::NEG_INFINITY;
    let mut worst_terminal = f64::NEG_INFINITY;
    for k in 0..instances {
        let (problem, n) = random_lattice_problem(&mut rng);
        let d = problem.modes;
        let run = LatticeRun::new(problem, n);
        let weights = weights_for(&run.scenario, 1.0);
        ensure(weights.is_monotone_for(run.problem.lipschitz_z), format!("instance {k}: weights not monotone"))?;
        let backend = CondExpBackend::bind(BackendKind::ExactLattice, &run.scenario).unwrap();
        let settings = SolverSettings::default();
        let base_inputs = ProblemInputs(&run.problem);
        let base = solve_generic(&base_inputs, &run.grid, &run.scenario, &weights, &backend, &settings).unwrap();

        let mut shift = Perturbation::none(d);
        shift.costs = 0.1;
        let dear = Perturbed { inner: &base_inputs, shift };
        let dear = solve_generic(&dear, &run.grid, &run.scenario, &weights, &backend, &settings).unwrap();

        let mut shift = Perturbation::none(d);
        shift.terminal = (0..d).map(|_| rng.random_range(0.0..0.5)).collect();
        let rich = Perturbed { inner: &base_inputs, shift };
        let rich = solve_generic(&rich, &run.grid, &run.scenario, &weights, &backend, &settings).unwrap();

        for i in 0..=n {
            for node in 0..run.scenario.count(i) {
                for (a, b) in [(dear.y(i, node), base.y(i, node)), (dear.ytilde(i, node), base.ytilde(i, node))] {
                    let excess = a.iter().zip(b).map(|(x, y)| x - y).fold(f64::NEG_INFINITY, f64::max);
                    worst_cost = worst_cost.max(excess);
                    ensure(excess <= 1e-12, format!("instance {k}: dearer costs raise Y by {excess:e} at ({i},{node})"))?;
                }
                for (a, b) in [(rich.y(i, node), base.y(i, node)), (rich.ytilde(i, node), base.ytilde(i, node))] {
                    let deficit = a.iter().zip(b).map(|(x, y)| y - x).fold(f64::NEG_INFINITY, f64::max);
                    worst_terminal = worst_terminal.max(deficit);
                    ensure(
                        deficit <= 1e-12,
                        format!("instance {k}: larger terminal lowers Y by {deficit:e} at ({i},{node})"),
                    )?;
                }
            }
        }
    }
    Ok(format!(
        "{instances} instances, max rise under +0.1 costs {worst_cost:e}, max drop under raised terminal {worst_terminal:e}"
    ))
}

// ---------------------------------------------------------------------------
// 7. Convergence rate

fn criterion_convergence() -> Check {
    let started = Instant::now();
    let (x0, mu, s, t) = (1.0f64, 0.1, 0.3, 1.0);
    let (a, k) = ([0.5f64, -0.5], [9.0f64, 4.0]);
    let reference: Vec<f64> = (0..2).map(|j| (a[j] * t).exp() * (x0 + mu * t + k[j])).collect();
    let cfg = ProblemConfig::from_json(&format!(
        r#"{{
            "dimensions": {{"m": 1, "q": 1, "d": 2}},
            "horizon": {t},
            "x0": [{x0}],
            "drift": ["{mu}"],
            "diffusion": [["{s}"]],
            "driver": ["{} * y1", "{} * y2"],
            "terminal": ["x1 + {}", "x1 + {}"],
            "costs": [["0", "1e6"], ["1e6", "0"]],
            "lipschitz": {{"y": 0.5, "z": 1.0}},
            "grid": {{"n": 8, "gamma": 0.5}},
            "scenario": {{"backend": "regression", "n_paths": 200000, "seed": 2}},
            "solver": {{"basis_degree": 2}}
        }}"#,
        a[0], a[1], k[0], k[1]
    ))
    .map_err(|e| e.to_string())?;
    let table = run_convergence(&cfg, &[8, 16, 32, 64, 128], 0.5, &Reference::ClosedForm(reference), None)
        .map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let errors: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}:{:.2e}", r.n, r.error.unwrap_or(f64::NAN)))
        .collect();
    ensure(table.rows.iter().all(|r| r.failure.is_none()), "a convergence row failed")?;
    let slope = table.slope.ok_or("slope undefined")?;
    ensure((0.35..=1.1).contains(&slope), format!("slope {slope:.3} outside [0.35, 1.1]; errors {errors:?}"))?;
    ensure(secs < 300.0, format!("runtime {secs:.1}s exceeds 5 min"))?;
    Ok(format!("slope {slope:.3}, errors [{}], {secs:.1}s", errors.join(", ")))
}

// ---------------------------------------------------------------------------
// 8. Reflection refinement

fn criterion_refinement() -> Check {
    let cfg = ProblemConfig::from_json(
        r#"{
            "dimensions": {"m": 1, "q": 1, "d": 2},
            "horizon": 1.0,
            "x0": [1.0],
            "drift": ["0"],
            "diffusion": [["0.3"]],
            "driver": ["-0.1 * y1", "x1 - 1 - 0.1 * y2"],
            "terminal": ["0", "0"],
            "costs": [["0", "0.05"], ["0.05", "0"]],
            "lipschitz": {"y": 0.1, "z": 1.0},
            "grid": {"n": 256, "gamma": 1.0},
            "scenario": {"backend": "regression", "n_paths": 20000, "seed": 4},
            "solver": {"basis_degree": 3}
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let run = cfg.prepare(None).map_err(|e| e.to_string())?;
    let study = reflection_refinement(&run, &[64, 32, 16, 8, 4, 2]).map_err(|e| e.to_string())?;
    let drifts: Vec<String> = study.rows.iter().map(|r| format!("{:.2e}", r.drift)).collect();
    let ratios = study.ratios(1.0);
    for (k, (observed, expected)) in ratios.iter().enumerate() {
        ensure(
            study.rows[k + 1].drift < study.rows[k].drift,
            format!("drift not decreasing at step {}: {drifts:?}", k + 1),
        )?;
        ensure(
            *observed <= 1.2 * expected,
            format!("step {}: ratio {observed:.3} > 1.2 x {expected:.3}; drifts {drifts:?}", k + 1),
        )?;
    }
    let coarse = reflection_error_scale(study.rows[0].h_reflection, 1.0);
    let shown: Vec<String> = ratios.iter().map(|(o, e)| format!("{o:.2}/{e:.2}")).collect();
    Ok(format!("drifts [{}], observed/expected ratios [{}], coarse scale {coarse:.3}", drifts.join(", "), shown.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. Stability

fn criterion_stability() -> Check {
    let cfg = ProblemConfig::from_json(
        r#"{
            "dimensions": {"m": 1, "q": 1, "d": 2},
            "horizon": 1.0,
            "x0": [0.0],
            "drift": ["0"],
            "diffusion": [["1"]],
            "driver": ["x1 - 0.5 * y1 + 0.3 * z1", "-x1 + 0.2 * abs(z1)"],
            "terminal": ["0.1 * clamp(x1, -1, 1)", "-0.1 * clamp(x1, -1, 1)"],
            "costs": [["0", "0.3"], ["0.2", "0"]],
            "lipschitz": {"y": 0.5, "z": 0.3},
            "grid": {"n": 6, "gamma": 1.0},
            "scenario": {"backend": "lattice"}
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let run = cfg.prepare(None).map_err(|e| e.to_string())?;
    let study = perturbation_study(&run, &[0.01, 0.02, 0.04]).map_err(|e| e.to_string())?;
    let spread = study.spread.ok_or("a perturbation left Y_0 unchanged")?;
    ensure(spread <= 3.0, format!("|dY_0|/zeta spread {spread} > 3"))?;
    let ratios: Vec<String> = study.rows.iter().map(|r| format!("{:.4}", r.ratio)).collect();
    Ok(format!("ratios [{}], spread {spread:.6}", ratios.join(", ")))
}

// ---------------------------------------------------------------------------
// 10. Parser

enum Golden {
    Value(f64),
    Error(usize, usize),
}

fn golden_cases() -> Vec<(&'static str, Golden)> {
    use Golden::{Error as E, Value as V};
    // Evaluated at x = (2, -1), y = (1, 4, 0.5), z = (2, -3).
    vec![
        ("0", V(0.0)),
        ("42", V(42.0)),
        ("3.5", V(3.5)),
        (".25", V(0.25)),
        ("1e3", V(1000.0)),
        ("2.5E-1", V(0.25)),
        ("x1", V(2.0)),
        ("x2", V(-1.0)),
        ("y2 - y1 + 0.5*z1", V(4.0)),
        ("max(x1 - 1, 0)", V(1.0)),
        ("min(x1, x2)", V(-1.0)),
        ("abs(x2)", V(1.0)),
        ("exp(0)", V(1.0)),
        ("clamp(x1, -1, 1)", V(1.0)),
        ("clamp(x2, 0, 5)", V(0.0)),
        ("clamp(0.5, 0, 1)", V(0.5)),
        ("1 + 2 * 3", V(7.0)),
        ("(1 + 2) * 3", V(9.0)),
        ("10 - 4 - 3", V(3.0)),
        ("64 / 4 / 2", V(8.0)),
        ("-x1", V(-2.0)),
        ("--x1", V(2.0)),
        ("-2 * -3", V(6.0)),
        ("2 * -x2", V(2.0)),
        ("-(1 + 2)", V(-3.0)),
        ("x1 * x1 - x2 / 2", V(4.5)),
        ("max(min(y1, y2), z1)", V(2.0)),
        ("exp(x1) - exp(x1)", V(0.0)),
        ("  y3  ", V(0.5)),
        ("z2 * z2", V(9.0)),
        ("abs(-3.25)", V(3.25)),
        ("1 / 4", V(0.25)),
        ("y1 +\n y2", V(5.0)),
        ("max(1, 2) * min(3, 4) - abs(-5)", V(1.0)),
        ("0.1 * clamp(x1, -1, 1)", V(0.1)),
        ("x1 - 0.5 * y1 + 0.3 * z1", V(2.0 - 0.5 * 1.0 + 0.3 * 2.0)),
        ("exp(1)", V(std::f64::consts::E)),
        ("", E(1, 1)),
        ("1 +", E(1, 4)),
        ("foo", E(1, 1)),
        ("x0", E(1, 1)),
        ("x1 + w2", E(1, 6)),
        ("max(1)", E(1, 1)),
        ("exp(1, 2)", E(1, 1)),
        ("sin(x1)", E(1, 1)),
        ("(1 + 2", E(1, 1)),
        ("1 2", E(1, 3)),
        ("x1 $ 2", E(1, 4)),
        ("1e", E(1, 1)),
        ("y1 +\n  )", E(2, 3)),
        ("abs", E(1, 1)),
        ("1e400", E(1, 1)),
        ("max(1, 2", E(1, 4)),
        ("2 * (3 - )", E(1, 10)),
        ("x01", E(1, 1)),
        ("1..2", E(1, 1)),
    ]
}

fn random_tree(rng: &mut impl Rng, depth: usize) -> Expr {
    let leaf = depth == 0 || rng.random_bool(0.25);
    if leaf {
        return if rng.random_bool(0.5) {
            let c = match rng.random_range(0..4) {
                0 => rng.random_range(0..100) as f64,
                1 => rng.random_range(0.0..10.0),
                2 => rng.random_range(0.0..1.0) * 10f64.powi(rng.random_range(-20..20)),
                _ => 0.1,
            };
            Expr::Const(c)
        } else {
            let kind = [VarKind::X, VarKind::Y, VarKind::Z][rng.random_range(0..3)];
            Expr::Var(Var { kind, index: rng.random_range(0..4) })
        };
    }
    match rng.random_range(0..3) {
        0 => Expr::Neg(Box::new(random_tree(rng, depth - 1))),
        1 => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][rng.random_range(0..4)];
            Expr::Binary(op, Box::new(random_tree(rng, depth - 1)), Box::new(random_tree(rng, depth - 1)))
        }
        _ => {
            let f = [Func::Min, Func::Max, Func::Exp, Func::Abs, Func::Clamp][rng.random_range(0..5)];
            Expr::Call(f, (0..f.arity()).map(|_| random_tree(rng, depth - 1)).collect())
        }
    }
}

fn criterion_parser() -> Check {
    let (x, y, z) = ([2.0, -1.0], [1.0, 4.0, 0.5], [2.0, -3.0]);
    let cases = golden_cases();
    for (src, expected) in &cases {
        match (parse_expression(src), expected) {
            (Ok(e), Golden::Value(v)) => {
                let got = e.eval(&x, &y, &z);
                ensure(got == *v, format!("{src:?} evaluates to {got}, expected {v}"))?;
            }
            (Err(err), Golden::Error(line, col)) => ensure(
                (err.line, err.column) == (*line, *col),
                format!("{src:?} fails at {}:{}, expected {line}:{col} ({})", err.line, err.column, err.message),
            )?,
            (Ok(_), Golden::Error(..)) => return Err(format!("{src:?} parsed but should fail")),
            (Err(err), Golden::Value(_)) => return Err(format!("{src:?} failed: {err}")),
        }
    }
    let scoped = parse_in_scope("x1 + y1", &Scope::state(1));
    ensure(
        matches!(&scoped, Err(e) if (e.line, e.column) == (1, 6)),
        "state scope accepted a backward variable",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trees = 1000;
    for k in 0..trees {
        let tree = random_tree(&mut rng, 6);
        let text = tree.to_string();
        let back = parse_expression(&text).map_err(|e| format!("tree {k}: {text:?} does not reparse: {e}"))?;
        ensure(back == tree, format!("tree {k}: round trip changed {text:?}"))?;
        ensure(back.to_string() == text, format!("tree {k}: printing is not stable"))?;
    }
    Ok(format!("{} golden cases, {trees} random trees round-trip", cases.len() + 1))
}

// ---------------------------------------------------------------------------

/// Written to the raw stderr handle so the lines survive output capture.
fn report(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("projection suite", criterion_projection),
        ("Snell oracle", criterion_snell),
        ("martingale exactness", criterion_martingale),
        ("weight moments", criterion_weights),
        ("implicit step", criterion_picard),
        ("comparison", criterion_comparison),
        ("convergence rate", criterion_convergence),
        ("reflection refinement", criterion_refinement),
        ("stability", criterion_stability),
        ("parser", criterion_parser),
    ];
    let mut failures = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => report(format!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", k + 1)),
            Err(detail) => {
                report(format!("criterion {:>2} {name}: FAIL ({detail}) [{secs:.1}s]", k + 1));
                failures.push(k + 1);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
