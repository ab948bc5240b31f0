//! Problem configuration files, expression parsing, persistence and
//! numerical studies built on the solver.

pub mod config;
pub mod convergence;
pub mod experiments;
pub mod export;
pub mod expr;

pub use config::{PreparedRun, ProblemConfig};
pub use convergence::{run_convergence, ConvergenceRow, ConvergenceTable, Reference};
pub use experiments::{perturbation_study, reflection_refinement, PerturbationStudy, RefinementStudy};
pub use export::SolutionSummary;
pub use expr::{parse_expression, Expr, ParseError};
