//! Simulator for size-structured growth-fragmentation dynamics.
//!
//! Cells of size `x` grow at rate `g(x)`, divide at rate `B(x)` and scatter
//! their fragments according to a kernel `k(x, y)` (size `x` fragments from a
//! size `y` parent).  The population density obeys
//!
//! ```text
//! d/dt n(t,x) + d/dx (g(x) n(t,x)) + B(x) n(t,x)
//!     = ∫_x^∞ k(x,y) B(y) n(t,y) dy,      g(0) n(t,0) = 0.
//! ```
//!
//! The crate discretises states as a hybrid of a per-cell density and a list
//! of point masses (atoms), computes the dominant growth rate together with
//! the stationary profile and its dual weight, marches the dynamics with a
//! positivity-preserving split scheme, and certifies convex relative-entropy
//! decay along trajectories.

pub mod coefficients;
pub mod dynamics;
pub mod eigen;
pub mod entropy;
pub mod grid;
pub mod io;
pub mod pipeline;
pub mod scenario;

pub use coefficients::{
    discretize_kernel, eval_kernel, validate_assumptions, CoefficientSet, FunctionSpec,
    KernelMatrix, KernelSpec, ValidationReport,
};
pub use dynamics::{
    conservation_check, simulate, step, weak_form_residual, ConservationReport, SolverConfig,
    Trajectory,
};
pub use eigen::{
    build_generator, eigen_identities, solve_dual, solve_primal, solve_triple, EigenTriple,
    Generator, IdentityReport, SolveOptions,
};
pub use entropy::{
    dissipation, dissipation_budget, entropy_balance_check, relative_entropy, BalanceSeries,
    DissipationBudget, EntropyFamily, EntropySpec,
};
pub use grid::{tv_phi_distance, Atom, Grid, HybridMeasure, PhiSamples};
pub use pipeline::{convergence_study, run_pipeline, PipelineReport, Stage, StudyReport};
pub use scenario::{load_scenario, parse_scenario, Scenario};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Scenario content is invalid; `path` names the offending field.
    #[error("scenario: {path}: {message}")]
    Scenario { path: String, message: String },
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain: {0}")]
    Domain(String),
    /// Coefficients violate the structural assumptions and no override was given.
    #[error("non-conforming coefficients: {0} (set allow_non_conforming to override)")]
    NonConforming(String),
    /// Requested operation is undefined for these inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// Power iteration ran out of iterations.
    #[error("eigensolver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    /// Primal and dual eigenvalue estimates disagree beyond tolerance.
    #[error("primal/dual eigenvalue mismatch: {primal:.12} vs {dual:.12}")]
    EigenMismatch { primal: f64, dual: f64 },
    /// A quantity that must stay (strictly) positive failed to do so.
    #[error("positivity lost: {0}")]
    Positivity(String),
    /// Requested time step exceeds the stability limit.
    #[error("time step {dt:.6e} exceeds the CFL limit {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },
    /// Too much mass accumulated near the truncation boundary.
    #[error("boundary mass monitor tripped at t = {t:.6}: fraction {fraction:.3e} > {limit:.3e}")]
    BoundaryMass { t: f64, fraction: f64, limit: f64 },
    /// Entropy spec is not admissible for the requested computation.
    #[error("entropy: {0}")]
    Entropy(String),
    /// Test function does not vanish near the domain boundary.
    #[error("test function support: {0}")]
    Support(String),
    /// Snapshot cadence too coarse for the requested diagnostic.
    #[error("snapshot cadence: {0}")]
    Cadence(String),
    /// Index out of range.
    #[error("index: {0}")]
    Index(String),
    /// Convergence study configuration is invalid.
    #[error("study: {0}")]
    Study(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
