//! Discrete-time approximation of obliquely reflected backward SDEs and the
//! optimal switching problems they describe.
//!
//! The pieces, in the order a solve uses them:
//!
//! * [`model`]: time grids, coefficients, switching costs and validation.
//! * [`forward`]: Euler paths or a binomial lattice for the forward state.
//! * [`weights`]: the `H` weights used to estimate `Z`.
//! * [`condexp`]: conditional expectations, exact on lattices and by
//!   least squares on paths.
//! * [`projection`]: the oblique projection onto the switching domain.
//! * [`scheme`]: the backward scheme itself.
//! * [`switching`]: strategies, the switched scheme and optimality checks.
//! * [`harness`]: configuration files, persistence and numerical studies.

pub mod condexp;
pub mod error;
pub mod forward;
pub mod harness;
pub mod model;
pub mod projection;
pub mod scheme;
pub mod switching;
pub mod weights;

pub use condexp::{BackendKind, CondExpBackend};
pub use error::{Error, Result};
pub use forward::{build_lattice, simulate_euler, LatticeModel, PathEnsemble, ScenarioSet};
pub use model::{build_grids, CostStructure, SwitchingProblem, TimeGrid, ValidationReport};
pub use projection::{project, CostMatrix};
pub use scheme::{solve, solve_generic, Retention, SchemeSolution, SolverSettings, StepInputs};
pub use switching::{evaluate_switched, extract_optimal_strategy, snell_check, Strategy};
pub use weights::{rademacher_weights, truncated_gaussian_weights, WeightFamily};
