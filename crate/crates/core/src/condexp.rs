//! Conditional expectation backends `E[. | F_{t_i}]`.
//!
//! The exact lattice backend averages over children. The least-squares
//! backend regresses on standardized monomials of the state at `t_i` and
//! evaluates the fit at every scenario node, so its output at time `i` is a
//! function of `X_{t_i}` alone.

use std::sync::{Arc, OnceLock};

use nalgebra::{linalg::ColPivQR, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ScenarioSet;

/// Default total degree of the polynomial basis.
pub const DEFAULT_BASIS_DEGREE: usize = 3;
/// Default ridge penalty on the standardized non-constant features.
pub const DEFAULT_RIDGE: f64 = 1e-10;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    ExactLattice,
    LeastSquares { basis_degree: usize, ridge: f64 },
}

impl BackendKind {
    pub fn least_squares_default() -> Self {
        BackendKind::LeastSquares {
            basis_degree: DEFAULT_BASIS_DEGREE,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// A backend bound to one scenario set.
pub struct CondExpBackend<'a> {
    kind: BackendKind,
    scenario: &'a ScenarioSet,
    fits: Vec<OnceLock<Arc<RegressionFit>>>,
}

impl<'a> CondExpBackend<'a> {
    pub fn bind(kind: BackendKind, scenario: &'a ScenarioSet) -> Result<Self> {
        match kind {
            BackendKind::ExactLattice if !scenario.is_lattice() => {
                return Err(Error::invalid("the exact backend needs a lattice scenario set"));
            }
            BackendKind::LeastSquares { ridge, .. } if !(ridge >= 0.0) => {
                return Err(Error::invalid("ridge penalty must be non-negative"));
            }
            _ => {}
        }
        let n = scenario.grid().n();
        Ok(Self {
            kind,
            scenario,
            fits: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn scenario(&self) -> &'a ScenarioSet {
        self.scenario
    }

    /// True when conditional expectations are computed exactly.
    pub fn is_exact(&self) -> bool {
        matches!(self.kind, BackendKind::ExactLattice)
    }

    /// Maps `values` (row-major, `count(i + 1) x cols`) to their conditional
    /// expectation at time `i` (row-major, `count(i) x cols`).
    pub fn condexp(&self, i: usize, values: &[f64], cols: usize) -> Result<Vec<f64>> {
        let sc = self.scenario;
        if i >= sc.grid().n() {
            return Err(Error::invalid(format!("time index {i} has no successor")));
        }
        if values.len() != sc.count(i + 1) * cols {
            return Err(Error::invalid(format!(
                "expected {} x {cols} values at time index {}, got {}",
                sc.count(i + 1),
                i + 1,
                values.len()
            )));
        }
        match self.kind {
            BackendKind::ExactLattice => Ok(lattice_average(sc, i, values, cols)),
            BackendKind::LeastSquares { .. } => {
                let fit = self.regression_fit(i)?;
                Ok(fit.fitted_values(sc, i, values, cols))
            }
        }
    }

    /// Cached regression design at time `i`.
    pub fn regression_fit(&self, i: usize) -> Result<Arc<RegressionFit>> {
        let BackendKind::LeastSquares { basis_degree, ridge } = self.kind else {
            return Err(Error::invalid("the exact backend has no regression fit"));
        };
        if let Some(f) = self.fits[i].get() {
            return Ok(f.clone());
        }
        let fit = Arc::new(RegressionFit::new(self.scenario, i, basis_degree, ridge).map_err(|e| e.at_time(i))?);
        Ok(self.fits[i].get_or_init(|| fit).clone())
    }
}

fn lattice_average(sc: &ScenarioSet, i: usize, values: &[f64], cols: usize) -> Vec<f64> {
    let parents = sc.count(i);
    let b = sc.count(i + 1) / parents;
    let w = 1.0 / b as f64;
    let mut out = vec![0.0; parents * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
        for c in p * b..(p + 1) * b {
            for (k, o) in row.iter_mut().enumerate() {
                *o += values[c * cols + k];
            }
        }
        for o in row.iter_mut() {
            *o *= w;
        }
    });
    out
}

/// Exponent tuples of all monomials in `m` variables of total degree at
/// most `degree`, graded by degree (the constant comes first).
pub fn monomial_exponents(m: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0u32; m];
        push_with_total(&mut out, &mut current, 0, total as u32);
    }
    out
}

fn push_with_total(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_with_total(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}

#[inline]
fn monomial(x: &[f64], exps: &[u32]) -> f64 {
    x.iter().zip(exps).map(|(v, &e)| v.powi(e as i32)).product()
}

/// Standardized polynomial design at one date, with the factorized normal
/// equations `(Phi^T Phi / N + ridge I') beta = Phi^T v / N`, where `I'`
/// skips the intercept.
pub struct RegressionFit {
    /// Non-constant monomials kept after dropping zero-variance ones.
    exponents: Vec<Vec<u32>>,
    means: Vec<f64>,
    scales: Vec<f64>,
    qr: ColPivQR<f64, Dyn, Dyn>,
}

impl RegressionFit {
    fn new(sc: &ScenarioSet, i: usize, degree: usize, ridge: f64) -> Result<Self> {
        let m = sc.state_dim();
        let count = sc.count(i);
        let candidates: Vec<Vec<u32>> = monomial_exponents(m, degree).into_iter().skip(1).collect();

        let nc = candidates.len();
        let nf = count as f64;
        let sum = chunked_sum(count, nc, |node, acc| {
            let x = sc.state(i, node);
            for (k, e) in candidates.iter().enumerate() {
                acc[k] += monomial(x, e);
            }
        });
        let centre: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let sum_sq = chunked_sum(count, nc, |node, acc| {
            let x = sc.state(i, node);
            for (k, e) in candidates.iter().enumerate() {
                acc[k] += (monomial(x, e) - centre[k]).powi(2);
            }
        });
        let mut exponents = Vec::new();
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for (k, e) in candidates.into_iter().enumerate() {
            let mean = centre[k];
            let scale = (sum_sq[k] / nf).sqrt();
            if scale > 1e-10 * mean.abs().max(1.0) {
                exponents.push(e);
                means.push(mean);
                scales.push(scale);
            }
        }

        let p = exponents.len() + 1;
        let mut fit = Self {
            exponents,
            means,
            scales,
            qr: DMatrix::<f64>::identity(1, 1).col_piv_qr(),
        };
        let gram = chunked_sum(count, p * p, |node, acc| {
            let mut phi = vec![0.0; p];
            fit.features(sc.state(i, node), &mut phi);
            for a in 0..p {
                for b in 0..p {
                    acc[a * p + b] += phi[a] * phi[b];
                }
            }
        });
        let mut g = DMatrix::from_row_slice(p, p, &gram) / nf;
        for k in 1..p {
            g[(k, k)] += ridge;
        }
        let qr = g.col_piv_qr();
        let r = qr.r();
        let r0 = r[(0, 0)].abs();
        let rank_deficient = (0..p).any(|k| r[(k, k)].abs() <= 1e-12 * r0 * p as f64);
        if rank_deficient || !r0.is_finite() {
            let hint = if ridge == 0.0 { "; use a positive ridge penalty" } else { "" };
            return Err(Error::NumericalFailure(format!(
                "singular normal equations in the regression design{hint}"
            )));
        }
        fit.qr = qr;
        Ok(fit)
    }

    /// Number of basis functions, intercept included.
    pub fn n_features(&self) -> usize {
        self.exponents.len() + 1
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    #[inline]
    fn features(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (k, e) in self.exponents.iter().enumerate() {
            out[k + 1] = (monomial(x, e) - self.means[k]) / self.scales[k];
        }
    }

    /// Coefficients on the standardized basis for each target column.
    pub fn coefficients(&self, sc: &ScenarioSet, i: usize, values: &[f64], cols: usize) -> Vec<DVector<f64>> {
        let p = self.n_features();
        let rows = sc.count(i + 1);
        let rhs = chunked_sum(rows, p * cols, |node, acc| {
            let mut phi = vec![0.0; p];
            self.features(sc.state(i, sc.ancestor(i + 1, node, i)), &mut phi);
            for a in 0..p {
                let f = phi[a];
                for c in 0..cols {
                    acc[a * cols + c] += f * values[node * cols + c];
                }
            }
        });
        let nf = rows as f64;
        (0..cols)
            .map(|c| {
                let b = DVector::from_iterator(p, (0..p).map(|a| rhs[a * cols + c] / nf));
                self.qr.solve(&b).unwrap_or_else(|| DVector::zeros(p))
            })
            .collect()
    }

    /// Coefficients re-expressed on raw monomials `(exponents, coefficient)`,
    /// constant term first.
    pub fn raw_coefficients(&self, beta: &DVector<f64>, m: usize) -> Vec<(Vec<u32>, f64)> {
        let mut constant = beta[0];
        let mut out = Vec::with_capacity(self.n_features());
        for (k, e) in self.exponents.iter().enumerate() {
            let c = beta[k + 1] / self.scales[k];
            constant -= c * self.means[k];
            out.push((e.clone(), c));
        }
        out.insert(0, (vec![0; m], constant));
        out
    }

    fn fitted_values(&self, sc: &ScenarioSet, i: usize, values: &[f64], cols: usize) -> Vec<f64> {
        let betas = self.coefficients(sc, i, values, cols);
        let p = self.n_features();
        let mut out = vec![0.0; sc.count(i) * cols];
        out.par_chunks_mut(cols).enumerate().for_each(|(node, row)| {
            let mut phi = vec![0.0; p];
            self.features(sc.state(i, node), &mut phi);
            for (c, o) in row.iter_mut().enumerate() {
                *o = phi.iter().zip(betas[c].iter()).map(|(a, b)| a * b).sum();
            }
        });
        out
    }
}

/// Sums per-item contributions into an `width`-vector, chunked so that the
/// result does not depend on the number of threads.
fn chunked_sum(items: usize, width: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = (0..items.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for item in c * CHUNK..((c + 1) * CHUNK).min(items) {
                f(item, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_lattice, simulate_euler};
    use crate::model::{SwitchingProblem, TimeGrid};
    use crate::projection::CostMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bm(m: usize, drift: f64) -> SwitchingProblem {
        SwitchingProblem::builder(m, 1, 1)
            .x0(vec![0.2; m])
            .drift(move |_, out| out.fill(drift))
            .diffusion(|_, out| out.fill(1.0))
            .constant_costs(&CostMatrix::constant(1, 0.0))
            .build()
            .unwrap()
    }

    #[test]
    fn monomials_are_graded() {
        assert_eq!(monomial_exponents(1, 3), vec![vec![0], vec![1], vec![2], vec![3]]);
        let two = monomial_exponents(2, 2);
        assert_eq!(two.len(), 6);
        assert_eq!(two[0], vec![0, 0]);
        assert!(two[1..3].iter().all(|e| e.iter().sum::<u32>() == 1));
    }

    #[test]
    fn constants_are_reproduced_by_both_backends() {
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let lat = ScenarioSet::Lattice(build_lattice(&bm(1, 0.0), &grid).unwrap());
        let ex = CondExpBackend::bind(BackendKind::ExactLattice, &lat).unwrap();
        let v = vec![2.5; lat.count(3)];
        assert!(ex.condexp(2, &v, 1).unwrap().iter().all(|&x| x == 2.5));

        let ens = ScenarioSet::Paths(simulate_euler(&bm(1, 0.0), &grid, 500, 1).unwrap());
        let ls = CondExpBackend::bind(BackendKind::LeastSquares { basis_degree: 3, ridge: 0.0 }, &ens).unwrap();
        for i in 0..3 {
            let out = ls.condexp(i, &vec![2.5; 500], 1).unwrap();
            assert!(out.iter().all(|&x| (x - 2.5).abs() < 1e-12), "time {i}");
        }
    }

    #[test]
    fn lattice_average_of_child_state_is_parent_mean() {
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let problem = bm(1, 0.3);
        let lat = ScenarioSet::Lattice(build_lattice(&problem, &grid).unwrap());
        let ex = CondExpBackend::bind(BackendKind::ExactLattice, &lat).unwrap();
        let vals: Vec<f64> = (0..lat.count(2)).map(|k| lat.state(2, k)[0]).collect();
        let out = ex.condexp(1, &vals, 1).unwrap();
        for p in 0..2 {
            assert!((out[p] - (lat.state(1, p)[0] + 0.3 * 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_target_coefficients() {
        // Targets X_1^2 + noise at time 1; E[target | X_1] = X_1^2.
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let n = 100_000;
        let ens = ScenarioSet::Paths(simulate_euler(&bm(1, 0.0), &grid, n, 5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let targets: Vec<f64> = (0..n)
            .map(|p| {
                let x = ens.state(1, p)[0];
                let e: f64 = StandardNormal.sample(&mut rng);
                x * x + e
            })
            .collect();
        let ls = CondExpBackend::bind(BackendKind::LeastSquares { basis_degree: 2, ridge: 0.0 }, &ens).unwrap();
        // Regress level-2 values on the level-1 state.
        let fit = ls.regression_fit(1).unwrap();
        let beta = &fit.coefficients(&ens, 1, &targets, 1)[0];
        let raw = fit.raw_coefficients(beta, 1);
        let expected = [0.0, 0.0, 1.0];
        for (k, (_, c)) in raw.iter().enumerate() {
            assert!((c - expected[k]).abs() < 0.05, "coefficient {k} = {c}");
        }
    }

    #[test]
    fn lattice_backend_is_linear_and_contractive() {
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let lat = ScenarioSet::Lattice(build_lattice(&bm(1, 0.1), &grid).unwrap());
        let ex = CondExpBackend::bind(BackendKind::ExactLattice, &lat).unwrap();
        let u: Vec<f64> = (0..8).map(|k| (k as f64).sin()).collect();
        let v: Vec<f64> = (0..8).map(|k| (k as f64 * 0.7).cos()).collect();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let eu = ex.condexp(2, &u, 1).unwrap();
        let ev = ex.condexp(2, &v, 1).unwrap();
        let em = ex.condexp(2, &mix, 1).unwrap();
        for k in 0..4 {
            assert!((em[k] - (2.0 * eu[k] - 3.0 * ev[k])).abs() < 1e-15);
        }
        let sup_in = u.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(eu.iter().all(|x| x.abs() <= sup_in));
    }

    #[test]
    fn regression_is_linear_and_order_invariant() {
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let n = 3000;
        let ens = simulate_euler(&bm(2, 0.0), &grid, n, 8).unwrap();
        let sc = ScenarioSet::Paths(ens.clone());
        let ls = CondExpBackend::bind(BackendKind::least_squares_default(), &sc).unwrap();
        let u: Vec<f64> = (0..n).map(|p| sc.state(2, p)[0].powi(2)).collect();
        let v: Vec<f64> = (0..n).map(|p| sc.state(2, p)[1].exp()).collect();
        let both: Vec<f64> = u.iter().zip(&v).flat_map(|(a, b)| [*a, *b]).collect();
        let joint = ls.condexp(1, &both, 2).unwrap();
        let eu = ls.condexp(1, &u, 1).unwrap();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * a + 2.0 * b).collect();
        let em = ls.condexp(1, &mix, 1).unwrap();
        for p in 0..n {
            assert!((joint[2 * p] - eu[p]).abs() < 1e-10);
            assert!((em[p] - (0.5 * joint[2 * p] + 2.0 * joint[2 * p + 1])).abs() < 1e-8);
        }
        // Reordering the paths permutes the fitted values.
        let fit_a = ls.regression_fit(1).unwrap();
        let beta_a = fit_a.coefficients(&sc, 1, &u, 1);
        let reversed = reverse_paths(&ens);
        let sc_r = ScenarioSet::Paths(reversed);
        let ls_r = CondExpBackend::bind(BackendKind::least_squares_default(), &sc_r).unwrap();
        let u_r: Vec<f64> = u.iter().rev().copied().collect();
        let out_r = ls_r.condexp(1, &u_r, 1).unwrap();
        for p in 0..n {
            assert!((out_r[n - 1 - p] - eu[p]).abs() < 1e-9);
        }
        assert_eq!(beta_a[0].len(), monomial_exponents(2, DEFAULT_BASIS_DEGREE).len());
    }

    fn reverse_paths(e: &crate::forward::PathEnsemble) -> crate::forward::PathEnsemble {
        let order: Vec<usize> = (0..e.n_paths()).rev().collect();
        e.select_paths(&order).unwrap()
    }

    #[test]
    fn exact_backend_rejects_path_ensembles() {
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let ens = ScenarioSet::Paths(simulate_euler(&bm(1, 0.0), &grid, 10, 1).unwrap());
        assert!(CondExpBackend::bind(BackendKind::ExactLattice, &ens).is_err());
    }

    #[test]
    fn singular_design_without_ridge_is_reported() {
        // Two distinct states only: a cubic basis is rank deficient.
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let lat = ScenarioSet::Lattice(build_lattice(&bm(1, 0.0), &grid).unwrap());
        let ls = CondExpBackend::bind(BackendKind::LeastSquares { basis_degree: 3, ridge: 0.0 }, &lat).unwrap();
        match ls.condexp(1, &vec![1.0; 4], 1) {
            Err(Error::NumericalFailure(msg)) => assert!(msg.contains("ridge")),
            other => panic!("expected a numerical failure, got {:?}", other.map(|_| ())),
        }
        let ridged = CondExpBackend::bind(BackendKind::LeastSquares { basis_degree: 3, ridge: 1e-8 }, &lat).unwrap();
        assert!(ridged.condexp(1, &vec![1.0; 4], 1).is_ok());
    }
}
