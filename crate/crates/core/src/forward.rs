//! Forward scenario structures: Euler Monte Carlo ensembles and exact
//! non-recombining lattices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{SwitchingProblem, TimeGrid};

/// Default cap on floats held by an ensemble (states plus increments).
pub const DEFAULT_FLOAT_BUDGET: usize = 1 << 28;
/// Largest `q * n` accepted by [`build_lattice`].
pub const LATTICE_EXPONENT_BUDGET: usize = 22;

const PATH_CHUNK: usize = 1024;

/// Simulated paths of the Euler scheme with their Brownian increments.
///
/// Path `p` draws its normals from its own ChaCha stream in
/// (interval, coordinate) order, so ensembles built with the same seed on
/// different grids share the leading normals of every path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    m: usize,
    q: usize,
    seed: u64,
    /// Path-major: `((p * (n + 1) + i) * m + k)`.
    states: Vec<f64>,
    /// Path-major: `((p * n + i) * q + l)`.
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn brownian_dim(&self) -> usize {
        self.q
    }

    #[inline]
    pub fn state(&self, i: usize, path: usize) -> &[f64] {
        let n1 = self.grid.n() + 1;
        let at = (path * n1 + i) * self.m;
        &self.states[at..at + self.m]
    }

    /// Brownian increment `W_{t_{i+1}} - W_{t_i}` of `path`.
    #[inline]
    pub fn increment(&self, i: usize, path: usize) -> &[f64] {
        let at = (path * self.grid.n() + i) * self.q;
        &self.increments[at..at + self.q]
    }

    /// Writes the ensemble as a little-endian binary dump: magic, dims,
    /// seed, grid dates, reflection flags, then states and increments as
    /// row-major `f64`.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(DUMP_MAGIC)?;
        for v in [self.m, self.q, self.n_paths, self.grid.n()] {
            put(&(v as u64).to_le_bytes())?;
        }
        put(&self.seed.to_le_bytes())?;
        for t in self.grid.times() {
            put(&t.to_le_bytes())?;
        }
        for &r in self.grid.reflection_flags() {
            put(&[r as u8])?;
        }
        for v in self.states.iter().chain(&self.increments) {
            put(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::invalid(format!("{} is not an ensemble dump", path.display())));
        }
        let m = read_u64(&mut r).map_err(io)? as usize;
        let q = read_u64(&mut r).map_err(io)? as usize;
        let n_paths = read_u64(&mut r).map_err(io)? as usize;
        let n = read_u64(&mut r).map_err(io)? as usize;
        let seed = read_u64(&mut r).map_err(io)?;
        let times = read_f64s(&mut r, n + 1).map_err(io)?;
        let mut flags = vec![0u8; n + 1];
        r.read_exact(&mut flags).map_err(io)?;
        let grid = TimeGrid::new(times, flags.iter().map(|&f| f != 0).collect())?;
        let states = read_f64s(&mut r, n_paths * (n + 1) * m).map_err(io)?;
        let increments = read_f64s(&mut r, n_paths * n * q).map_err(io)?;
        Ok(Self {
            grid,
            n_paths,
            m,
            q,
            seed,
            states,
            increments,
        })
    }

    /// A new ensemble made of the listed paths, in that order.
    pub fn select_paths(&self, order: &[usize]) -> Result<Self> {
        if order.is_empty() || order.iter().any(|&p| p >= self.n_paths) {
            return Err(Error::invalid("path selection out of range or empty"));
        }
        let n = self.grid.n();
        let (ws, wi) = ((n + 1) * self.m, n * self.q);
        let mut states = Vec::with_capacity(order.len() * ws);
        let mut increments = Vec::with_capacity(order.len() * wi);
        for &p in order {
            states.extend_from_slice(&self.states[p * ws..(p + 1) * ws]);
            increments.extend_from_slice(&self.increments[p * wi..(p + 1) * wi]);
        }
        Ok(Self {
            grid: self.grid.clone(),
            n_paths: order.len(),
            m: self.m,
            q: self.q,
            seed: self.seed,
            states,
            increments,
        })
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

const DUMP_MAGIC: &[u8; 8] = b"ORBSDE01";

/// One Euler step `x + b(x) h + sigma(x) dw` written into `out`.
fn euler_step(
    problem: &SwitchingProblem,
    x: &[f64],
    h: f64,
    dw: &[f64],
    drift: &mut [f64],
    sigma: &mut [f64],
    out: &mut [f64],
) {
    let q = problem.brownian_dim;
    problem.drift_into(x, drift);
    problem.diffusion_into(x, sigma);
    for k in 0..x.len() {
        let mut v = x[k] + drift[k] * h;
        for l in 0..q {
            v += sigma[k * q + l] * dw[l];
        }
        out[k] = v;
    }
}

/// Simulates `n_paths` Euler paths of the forward SDE on `grid`.
pub fn simulate_euler(problem: &SwitchingProblem, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    simulate_euler_with_budget(problem, grid, n_paths, seed, DEFAULT_FLOAT_BUDGET)
}

pub fn simulate_euler_with_budget(
    problem: &SwitchingProblem,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    float_budget: usize,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let (m, q, n) = (problem.state_dim, problem.brownian_dim, grid.n());
    let needed = n_paths as u128 * ((n as u128 + 1) * m as u128 + n as u128 * q as u128);
    if needed > float_budget as u128 {
        return Err(Error::Capacity {
            what: "path ensemble floats",
            requested: needed,
            budget: float_budget as u128,
        });
    }
    let mut states = vec![0.0; n_paths * (n + 1) * m];
    let mut increments = vec![0.0; n_paths * n * q];
    let steps: Vec<f64> = (0..n).map(|i| grid.step(i)).collect();

    states
        .par_chunks_mut(PATH_CHUNK * (n + 1) * m)
        .zip(increments.par_chunks_mut(PATH_CHUNK * n * q))
        .enumerate()
        .for_each(|(chunk, (st, inc))| {
            let mut drift = vec![0.0; m];
            let mut sigma = vec![0.0; m * q];
            let paths_here = st.len() / ((n + 1) * m);
            for local in 0..paths_here {
                let path = chunk * PATH_CHUNK + local;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(path as u64);
                let st = &mut st[local * (n + 1) * m..(local + 1) * (n + 1) * m];
                let inc = &mut inc[local * n * q..(local + 1) * n * q];
                st[..m].copy_from_slice(&problem.x0);
                for i in 0..n {
                    let sd = steps[i].sqrt();
                    let dw = &mut inc[i * q..(i + 1) * q];
                    for v in dw.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = sd * z;
                    }
                    let (head, tail) = st.split_at_mut((i + 1) * m);
                    euler_step(problem, &head[i * m..], steps[i], dw, &mut drift, &mut sigma, &mut tail[..m]);
                }
            }
        });

    Ok(PathEnsemble {
        grid: grid.clone(),
        n_paths,
        m,
        q,
        seed,
        states,
        increments,
    })
}

/// Non-recombining tree with `2^q` equally likely children per node, the
/// increment of coordinate `l` being `+sqrt(h_i)` when bit `l` of the child
/// label is set and `-sqrt(h_i)` otherwise.
///
/// Nodes are stored level by level; the children of node `p` at level `i`
/// are `p * 2^q .. (p + 1) * 2^q` at level `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeModel {
    grid: TimeGrid,
    m: usize,
    q: usize,
    /// `levels[i]` holds `2^{q i} * m` state coordinates.
    levels: Vec<Vec<f64>>,
}

impl LatticeModel {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn brownian_dim(&self) -> usize {
        self.q
    }

    pub fn branching(&self) -> usize {
        1 << self.q
    }

    pub fn nodes_at(&self, i: usize) -> usize {
        1 << (self.q * i)
    }

    pub fn total_nodes(&self) -> usize {
        (0..=self.grid.n()).map(|i| self.nodes_at(i)).sum()
    }

    #[inline]
    pub fn state(&self, i: usize, node: usize) -> &[f64] {
        &self.levels[i][node * self.m..(node + 1) * self.m]
    }

    /// Probability of reaching `node` at level `i`.
    pub fn probability(&self, i: usize) -> f64 {
        (0.5f64).powi((self.q * i) as i32)
    }

    /// Parent of `node` at level `i` (which must be positive).
    pub fn parent(&self, node: usize) -> usize {
        node >> self.q
    }

    /// Increment label of `node` relative to its parent.
    pub fn label(&self, node: usize) -> usize {
        node & (self.branching() - 1)
    }

    /// Increment coordinate `l` carried by `node` at level `i + 1`.
    #[inline]
    pub fn increment_coord(&self, i: usize, node: usize, l: usize) -> f64 {
        let s = self.grid.step(i).sqrt();
        if (node >> l) & 1 == 1 {
            s
        } else {
            -s
        }
    }

    pub fn increment(&self, i: usize, node: usize) -> Vec<f64> {
        (0..self.q).map(|l| self.increment_coord(i, node, l)).collect()
    }
}

/// Builds the binary-per-coordinate lattice following the Euler map.
pub fn build_lattice(problem: &SwitchingProblem, grid: &TimeGrid) -> Result<LatticeModel> {
    let (m, q, n) = (problem.state_dim, problem.brownian_dim, grid.n());
    if q * n > LATTICE_EXPONENT_BUDGET {
        return Err(Error::Capacity {
            what: "lattice nodes (2^(q n))",
            requested: 1u128 << (q * n).min(127),
            budget: 1u128 << LATTICE_EXPONENT_BUDGET,
        });
    }
    let b = 1usize << q;
    let mut levels = Vec::with_capacity(n + 1);
    levels.push(problem.x0.clone());
    let mut drift = vec![0.0; m];
    let mut sigma = vec![0.0; m * q];
    let mut dw = vec![0.0; q];
    for i in 0..n {
        let h = grid.step(i);
        let s = h.sqrt();
        let parents = &levels[i];
        let count = parents.len() / m;
        let mut next = vec![0.0; count * b * m];
        for p in 0..count {
            let x = &parents[p * m..(p + 1) * m];
            for label in 0..b {
                for (l, v) in dw.iter_mut().enumerate() {
                    *v = if (label >> l) & 1 == 1 { s } else { -s };
                }
                let child = p * b + label;
                euler_step(problem, x, h, &dw, &mut drift, &mut sigma, &mut next[child * m..(child + 1) * m]);
            }
        }
        levels.push(next);
    }
    Ok(LatticeModel {
        grid: grid.clone(),
        m,
        q,
        levels,
    })
}

/// The scenario structure a backward scheme runs on.
#[derive(Debug, Clone)]
pub enum ScenarioSet {
    Lattice(LatticeModel),
    Paths(PathEnsemble),
}

impl ScenarioSet {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            ScenarioSet::Lattice(l) => l.grid(),
            ScenarioSet::Paths(p) => p.grid(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ScenarioSet::Lattice(l) => l.state_dim(),
            ScenarioSet::Paths(p) => p.state_dim(),
        }
    }

    pub fn brownian_dim(&self) -> usize {
        match self {
            ScenarioSet::Lattice(l) => l.brownian_dim(),
            ScenarioSet::Paths(p) => p.brownian_dim(),
        }
    }

    /// Number of scenario nodes at time index `i`.
    pub fn count(&self, i: usize) -> usize {
        match self {
            ScenarioSet::Lattice(l) => l.nodes_at(i),
            ScenarioSet::Paths(p) => p.n_paths(),
        }
    }

    #[inline]
    pub fn state(&self, i: usize, node: usize) -> &[f64] {
        match self {
            ScenarioSet::Lattice(l) => l.state(i, node),
            ScenarioSet::Paths(p) => p.state(i, node),
        }
    }

    /// Coordinate `l` of the increment on `[t_i, t_{i+1}]` leading to `node`
    /// at level `i + 1`.
    #[inline]
    pub fn increment_coord(&self, i: usize, node: usize, l: usize) -> f64 {
        match self {
            ScenarioSet::Lattice(lat) => lat.increment_coord(i, node, l),
            ScenarioSet::Paths(p) => p.increment(i, node)[l],
        }
    }

    /// Node at level `i` that `node` at level `k >= i` descends from.
    pub fn ancestor(&self, k: usize, node: usize, i: usize) -> usize {
        match self {
            ScenarioSet::Lattice(l) => node >> (l.brownian_dim() * (k - i)),
            ScenarioSet::Paths(_) => node,
        }
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self, ScenarioSet::Lattice(_))
    }

    /// Probability weight of one node at level `i` (uniform within a level).
    pub fn node_weight(&self, i: usize) -> f64 {
        match self {
            ScenarioSet::Lattice(l) => l.probability(i),
            ScenarioSet::Paths(p) => 1.0 / p.n_paths() as f64,
        }
    }

    /// Up to `max_points` states spread over all dates, always including `x0`.
    pub fn sample_states(&self, max_points: usize) -> Vec<Vec<f64>> {
        let n = self.grid().n();
        let total: usize = (0..=n).map(|i| self.count(i)).sum();
        let stride = (total / max_points.max(1)).max(1);
        let mut out = Vec::new();
        let mut k = 0usize;
        for i in 0..=n {
            for node in 0..self.count(i) {
                if k % stride == 0 && out.len() < max_points.max(1) {
                    out.push(self.state(i, node).to_vec());
                }
                k += 1;
            }
        }
        out
    }
}
