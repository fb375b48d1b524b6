//! Optimal extraction of a nonrenewable resource whose price follows a
//! regime-switching Lévy process.
//!
//! The value function is `V(x, y, i) = A(i) x² − θ y − K/r` and the optimal
//! policy is the linear feedback `u*(x, i) = (1 − 2λA(i)) x / (2β)`, where the
//! vector `A` solves a coupled system of quadratics. This crate builds that
//! system, finds every root, selects the admissible one, and then checks the
//! result three independent ways: quadrature of the Lévy integral, the HJB
//! residual of the closed form, and a Monte-Carlo estimate of the payoff.
//!
//! Modules:
//! - [`model`]: problem data, validation, reference fixtures.
//! - [`levy`]: jump integrals (closed form and quadrature) and jump sampling.
//! - [`solver`]: the quadratic system, its roots, and the admissible solution.
//! - [`sim`]: controlled path simulation and payoff estimation.
//! - [`verify`]: residual, cross-check and reproduction reports.

pub mod error;
pub mod json;
pub mod levy;
pub mod model;
pub mod quad;
pub mod sim;
pub mod solver;
pub mod verify;

mod sum;

pub use error::{Error, Result};
pub use levy::{JumpIntegral, JumpSampler, LevyMeasureSpec};
pub use model::{
    CostParams, InitialState, MarketModel, ModelConfig, PrintedFixture, RegimeParams,
    SwitchGenerator, ValidationReport,
};
pub use sim::{PayoffEstimate, Policy, PolicyKind, Scheme, SimConfig};
pub use solver::{Period, QuadraticSystem, RootSet, RootVector, Solution, SystemMode};
