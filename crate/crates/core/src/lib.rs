//! Solver and verification toolkit for systems of degenerate parabolic
//! integro-differential equations coupled through interconnected obstacles,
//! the dynamic-programming equations of optimal switching under
//! jump-diffusion dynamics:
//!
//! ```text
//! min{ -du_i/dt + F_i(x, t, u_i, Du_i, D^2u_i, u_i(., t)),
//!      u_i - max_{j != i} (u_j - c_ij) } = 0        on R^n x [0, T),
//! u_i(x, T) = g_i(x),                               i = 1..m,
//! ```
//!
//! where `F_i = -L_i - J_i - f_i` collects a linear second-order operator
//! `L_i u = sum a_kl u_kl + sum b_k u_k - c0 u` with `a = sigma sigma^T`, a
//! nonlocal jump operator `J_i` driven by a Levy measure, and a running
//! payoff `f_i`.
//!
//! The crate provides, per module:
//!
//! - [`expr`]: closed-form coefficient expressions (the problem-file format);
//! - [`model`]: problem/grid types and data-assumption validation;
//! - [`switchgraph`]: switching-cost fields, loop checks, cheapest-chain closure;
//! - [`nonlocal`]: Levy-measure quadrature and the discrete jump operator;
//! - [`localop`]: monotone finite-difference discretization of `L_i`;
//! - [`barrier`]: polynomial-growth super/subsolution barriers and calibration;
//! - [`solver`]: the backward-in-time IMEX scheme with obstacle projection;
//! - [`oracle`]: brute-force dynamic-programming and Monte Carlo reference values;
//! - [`verify`]: continuous-dependence, comparison, and regularity experiments;
//! - [`report`]: deterministic CSV/JSON output and run manifests.

pub mod barrier;
pub mod expr;
pub mod localop;
pub mod model;
pub mod nonlocal;
pub mod oracle;
pub mod report;
pub mod solver;
pub mod switchgraph;
pub mod verify;

/// Crate-wide error type. The command-line tool maps these onto exit codes:
/// spec-file problems are usage errors, failed data assumptions are
/// validation failures, everything else is a runtime error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Problem-spec file could not be read or parsed.
    #[error("spec error: {0}")]
    Spec(String),

    /// A coefficient expression produced a non-finite value.
    #[error("non-finite value in field `{field}` at {point}")]
    NonFinite { field: String, point: String },

    /// A data assumption failed; `tag` names it (for example `O1` or `G`).
    #[error("assumption ({tag}) violated: {detail}")]
    Assumption { tag: &'static str, detail: String },

    /// Switching-cost loop with nonpositive total cost.
    #[error("nonpositive switching loop (O1): {0}")]
    NegativeLoop(String),

    /// Cross-derivative coefficient too large for a monotone stencil.
    #[error("monotone stencil unavailable: {0}")]
    Monotonicity(String),

    /// Explicit-part stability bound violated.
    #[error(
        "time step violates the explicit-part stability bound: dt = {dt:.6e}, required dt <= {required_dt:.6e}"
    )]
    CflViolation { dt: f64, required_dt: f64 },

    /// Iterative linear/complementarity solve did not reach tolerance.
    #[error("linear solve failed to converge: {0}")]
    LinearSolve(String),

    /// Obstacle coupling sweeps did not stabilize within the mode count.
    #[error("obstacle sweeps did not stabilize within {sweeps} sweeps (residual change {change:.3e}); check the no-free-loop condition (O1)")]
    SweepOverrun { sweeps: usize, change: f64 },

    /// Argument outside the domain of an operation (for example evaluating a
    /// barrier after its anchor time).
    #[error("domain error: {0}")]
    Domain(String),

    /// Requested configuration is structurally unsupported.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Search or enumeration exceeded its configured budget.
    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
