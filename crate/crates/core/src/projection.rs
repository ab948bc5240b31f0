//! The switching domain `Q` and its oblique projection.
//!
//! For a cost matrix `C` with zero diagonal, the domain is
//!
//! ```text
//! Q(C) = { y in R^d : y^i >= max_j (y^j - C^{ij}) for all i }
//! ```
//!
//! and the oblique projection is the componentwise maximum
//! `P(C, y)^i = max_j (y^j - C^{ij})`. Because the `j = i` term is `y^i`,
//! `P(C, y)` always dominates `y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switching costs evaluated at one state, stored row-major (`C[i][j]` is
/// the cost of leaving mode `i` for mode `j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("cost matrix must have at least one mode"));
        }
        if entries.len() != d * d {
            return Err(Error::invalid(format!(
                "cost matrix needs {} entries for d = {d}, got {}",
                d * d,
                entries.len()
            )));
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cost matrix entries must be finite"));
        }
        for i in 0..d {
            if entries[i * d + i] != 0.0 {
                return Err(Error::invalid(format!(
                    "cost matrix diagonal entry ({0},{0}) is {1}, expected 0",
                    i + 1,
                    entries[i * d + i]
                )));
            }
        }
        Ok(Self { d, entries })
    }

    /// All off-diagonal entries equal to `cost`.
    pub fn constant(d: usize, cost: f64) -> Self {
        let mut entries = vec![cost; d * d];
        for i in 0..d {
            entries[i * d + i] = 0.0;
        }
        Self { d, entries }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("cost matrix rows must all have length d"));
        }
        Self::new(d, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Returns a copy with `shift` added to every off-diagonal entry.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.d {
            for j in 0..self.d {
                if i != j {
                    out.entries[i * self.d + j] += shift;
                }
            }
        }
        out
    }

    /// Smallest value of the positivity and triangle margins:
    /// `C^{ij}` for `i != j` and `C^{ij} + C^{jl} - C^{il}` for `i != j, j != l`.
    /// Positive iff the structure condition holds. `+inf` when `d = 1`.
    pub fn structure_margin(&self) -> f64 {
        let d = self.d;
        let mut margin = f64::INFINITY;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                margin = margin.min(self.get(i, j));
                for l in 0..d {
                    if l == j {
                        continue;
                    }
                    margin = margin.min(self.get(i, j) + self.get(j, l) - self.get(i, l));
                }
            }
        }
        margin
    }

    pub fn is_structural(&self) -> bool {
        self.structure_margin() > 0.0
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.d {
            return Err(Error::invalid(format!(
                "vector has {len} components, cost matrix expects {}",
                self.d
            )));
        }
        Ok(())
    }

    /// Best alternative mode when leaving `mode`: the smallest index `m != mode`
    /// maximising `y^m - C^{mode,m}`, with that maximum. `None` when `d = 1`.
    pub fn best_switch(&self, y: &[f64], mode: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for m in 0..self.d {
            if m == mode {
                continue;
            }
            let v = y[m] - self.get(mode, m);
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((m, v)),
            }
        }
        best
    }

    /// Writes `P(C, y)` into `out` without allocating. Lengths are not checked.
    #[inline]
    pub fn project_into(&self, y: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let row = &self.entries[i * d..(i + 1) * d];
            let mut best = y[i];
            for (yj, c) in y.iter().zip(row) {
                let v = yj - c;
                if v > best {
                    best = v;
                }
            }
            out[i] = best;
        }
    }
}

/// `true` iff `y^i >= max_j (y^j - C^{ij}) - tol` for every `i`.
pub fn in_domain(costs: &CostMatrix, y: &[f64], tol: f64) -> Result<bool> {
    costs.check_dim(y.len())?;
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::invalid("membership tolerance must be non-negative"));
    }
    Ok(domain_violation(costs, y) <= tol)
}

/// Largest amount by which some component falls short of the domain
/// constraint; zero or negative inside `Q`.
pub fn domain_violation(costs: &CostMatrix, y: &[f64]) -> f64 {
    let d = costs.dim();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..d {
        for j in 0..d {
            worst = worst.max(y[j] - costs.get(i, j) - y[i]);
        }
    }
    worst
}

/// The oblique projection `P(C, y)^i = max_j (y^j - C^{ij})`.
pub fn project(costs: &CostMatrix, y: &[f64]) -> Result<Vec<f64>> {
    costs.check_dim(y.len())?;
    let mut out = vec![0.0; y.len()];
    costs.project_into(y, &mut out);
    Ok(out)
}
