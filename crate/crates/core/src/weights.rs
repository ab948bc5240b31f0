//! Weight families `H_i` used to estimate `Z_i = E[Y_{i+1} H_i | F_{t_i}]`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::forward::{LatticeModel, PathEnsemble, ScenarioSet};
use crate::model::{ValidationReport, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightKind {
    /// `H^l = clamp(dW^l / h, -R/h, R/h)`.
    TruncatedGaussian { r: f64 },
    /// Two-point increments `+-sqrt(h)`, so `H^l = +-1/sqrt(h)`.
    Rademacher,
}

/// Weight rows per interval and per scenario node at the interval's end.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFamily {
    kind: WeightKind,
    q: usize,
    steps: Vec<f64>,
    /// `values[i][node * q + l]`, `node` indexing level `i + 1`.
    values: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
}

impl WeightFamily {
    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn brownian_dim(&self) -> usize {
        self.q
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    /// `H_i^l` on the scenario node `node` at level `i + 1`.
    #[inline]
    pub fn value(&self, i: usize, node: usize, l: usize) -> f64 {
        self.values[i][node * self.q + l]
    }

    pub fn row(&self, i: usize, node: usize) -> &[f64] {
        &self.values[i][node * self.q..(node + 1) * self.q]
    }

    /// `lambda_i` with `h_i E[H_i^T H_i] = lambda_i I`.
    pub fn lambda(&self, i: usize) -> f64 {
        self.lambdas[i]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Structural bound on `sup_i h_i max_l |H_i^l|`.
    pub fn sup_scaled_weight(&self) -> f64 {
        match self.kind {
            WeightKind::TruncatedGaussian { r } => r,
            WeightKind::Rademacher => self.steps.iter().map(|h| h.sqrt()).fold(0.0, f64::max),
        }
    }

    /// `sup h |H| L^Z <= 1`, needed for the scheme to be monotone.
    pub fn is_monotone_for(&self, lipschitz_z: f64) -> bool {
        self.sup_scaled_weight() * lipschitz_z <= 1.0
    }
}

/// `h E[clamp(dW, -R, R)^2] / h^2` for `dW ~ N(0, h)`, i.e. the exact
/// `lambda` of truncated Gaussian weights.
pub fn truncated_gaussian_lambda(h: f64, r: f64) -> f64 {
    if r.is_infinite() {
        return 1.0;
    }
    let a = r / h.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let tail = 1.0 - std.cdf(a);
    // E[clamp(G, -a, a)^2] for G ~ N(0, 1).
    (1.0 - 2.0 * tail) - 2.0 * a * std.pdf(a) + 2.0 * a * a * tail
}

/// Clipped Brownian weights on a Monte Carlo ensemble.
pub fn truncated_gaussian_weights(ensemble: &PathEnsemble, r: f64) -> WeightFamily {
    assert!(r > 0.0, "truncation level R must be positive");
    let grid = ensemble.grid();
    let (n, q, np) = (grid.n(), ensemble.brownian_dim(), ensemble.n_paths());
    let steps: Vec<f64> = (0..n).map(|i| grid.step(i)).collect();
    let values = (0..n)
        .map(|i| {
            let h = steps[i];
            let cap = r / h;
            let mut v = Vec::with_capacity(np * q);
            for p in 0..np {
                for &dw in ensemble.increment(i, p) {
                    v.push((dw / h).clamp(-cap, cap));
                }
            }
            v
        })
        .collect();
    let lambdas = steps.iter().map(|&h| truncated_gaussian_lambda(h, r)).collect();
    WeightFamily {
        kind: WeightKind::TruncatedGaussian { r },
        q,
        steps,
        values,
        lambdas,
    }
}

/// `H_i = dW_i / h_i` on the lattice increments; `lambda_i = 1`.
pub fn rademacher_weights(lattice: &LatticeModel) -> WeightFamily {
    let grid = lattice.grid();
    let (n, q) = (grid.n(), lattice.brownian_dim());
    let steps: Vec<f64> = (0..n).map(|i| grid.step(i)).collect();
    let values = (0..n)
        .map(|i| {
            let h = steps[i];
            let count = lattice.nodes_at(i + 1);
            let mut v = Vec::with_capacity(count * q);
            for node in 0..count {
                for l in 0..q {
                    v.push(lattice.increment_coord(i, node, l) / h);
                }
            }
            v
        })
        .collect();
    WeightFamily {
        kind: WeightKind::Rademacher,
        q,
        steps,
        values,
        lambdas: vec![1.0; n],
    }
}

/// Natural weights for a scenario set: Rademacher on lattices, truncated
/// Gaussian with level `r` on ensembles.
pub fn weights_for(scenario: &ScenarioSet, r: f64) -> WeightFamily {
    match scenario {
        ScenarioSet::Lattice(l) => rademacher_weights(l),
        ScenarioSet::Paths(p) => truncated_gaussian_weights(p, r),
    }
}

/// How moment deviations are judged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentTolerance {
    Absolute(f64),
    /// Multiples of the Monte Carlo standard error of each moment.
    StandardErrors(f64),
}

/// Checks `E[H_i] = 0`, `h_i E[H_i^T H_i] = lambda_i I`, `lambda_i > 0`
/// and `sup h_i |H_i| L^Z <= 1`.
///
/// On a lattice the moments are exact conditional moments under every
/// parent node; on an ensemble they are sample moments. `min_margin` in the
/// report is the smallest slack `tolerance - deviation` observed.
pub fn check_moments(
    weights: &WeightFamily,
    scenario: &ScenarioSet,
    lipschitz_z: f64,
    tol: MomentTolerance,
) -> ValidationReport {
    let q = weights.q;
    let n = weights.intervals();
    let mut report = ValidationReport::default();
    let record = |report: &mut ValidationReport, deviation: f64, allowed: f64, v: Violation| {
        report.checked_points += 1;
        report.min_margin = report.min_margin.min(allowed - deviation);
        if !(deviation <= allowed) {
            report.violations.push(v);
        }
    };

    for i in 0..n {
        let h = weights.steps[i];
        let lambda = weights.lambdas[i];
        if !(lambda > 0.0) {
            report.violations.push(Violation::Lambda { interval: i, lambda });
        }
        match scenario {
            ScenarioSet::Lattice(lat) => {
                let b = lat.branching();
                let w = 1.0 / b as f64;
                for parent in 0..lat.nodes_at(i) {
                    let mut mean = vec![0.0; q];
                    let mut second = vec![0.0; q * q];
                    for child in parent * b..(parent + 1) * b {
                        let row = weights.row(i, child);
                        for a in 0..q {
                            mean[a] += w * row[a];
                            for c in 0..q {
                                second[a * q + c] += w * row[a] * row[c];
                            }
                        }
                    }
                    let allowed = match tol {
                        MomentTolerance::Absolute(t) | MomentTolerance::StandardErrors(t) => t,
                    };
                    for a in 0..q {
                        record(
                            &mut report,
                            mean[a].abs(),
                            allowed,
                            Violation::MomentMean { interval: i, coordinate: a, deviation: mean[a].abs(), tolerance: allowed },
                        );
                        for c in 0..q {
                            let target = if a == c { lambda } else { 0.0 };
                            let dev = (h * second[a * q + c] - target).abs();
                            record(
                                &mut report,
                                dev,
                                allowed,
                                Violation::MomentCovariance { interval: i, row: a, col: c, deviation: dev, tolerance: allowed },
                            );
                        }
                    }
                }
            }
            ScenarioSet::Paths(ens) => {
                let np = ens.n_paths();
                let nf = np as f64;
                for a in 0..q {
                    let xs = (0..np).map(|p| weights.value(i, p, a));
                    let (m, var) = mean_var(xs);
                    let allowed = match tol {
                        MomentTolerance::Absolute(t) => t,
                        MomentTolerance::StandardErrors(k) => k * (var / nf).sqrt(),
                    };
                    record(
                        &mut report,
                        m.abs(),
                        allowed,
                        Violation::MomentMean { interval: i, coordinate: a, deviation: m.abs(), tolerance: allowed },
                    );
                    for c in 0..q {
                        let xs = (0..np).map(|p| h * weights.value(i, p, a) * weights.value(i, p, c));
                        let (m2, var2) = mean_var(xs);
                        let target = if a == c { lambda } else { 0.0 };
                        let dev = (m2 - target).abs();
                        let allowed = match tol {
                            MomentTolerance::Absolute(t) => t,
                            MomentTolerance::StandardErrors(k) => k * (var2 / nf).sqrt(),
                        };
                        record(
                            &mut report,
                            dev,
                            allowed,
                            Violation::MomentCovariance { interval: i, row: a, col: c, deviation: dev, tolerance: allowed },
                        );
                    }
                }
            }
        }
    }

    let bound = weights.sup_scaled_weight() * lipschitz_z;
    if bound > 1.0 {
        report.violations.push(Violation::WeightBound { interval: worst_interval(weights), bound });
    }
    report
}

fn worst_interval(weights: &WeightFamily) -> usize {
    (0..weights.intervals())
        .max_by(|&a, &b| {
            let fa = weights.steps[a] * weights.values[a].iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let fb = weights.steps[b] * weights.values[b].iter().fold(0.0f64, |m, x| m.max(x.abs()));
            fa.total_cmp(&fb)
        })
        .unwrap_or(0)
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut count = 0.0;
    let mut sum = 0.0;
    for x in xs.clone() {
        count += 1.0;
        sum += x;
    }
    let mean = sum / count;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0);
    (mean, var)
}
