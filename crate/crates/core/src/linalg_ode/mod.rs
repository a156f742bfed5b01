//! Small dense linear algebra and deterministic ODE integration.
//!
//! Everything here works on `nalgebra` dynamic matrices of dimension at most a
//! handful. No sparse paths, no adaptive stepping: the step size is always the
//! caller's grid.

mod linalg;
mod ode;

pub use linalg::{
    cholesky_solve, expm, gaussian_log_density, solve_linear, solve_lyapunov, Cholesky, Matrix,
    Vector,
};
pub use ode::{rk4_solve, rk_backward, OdeTrajectory};
