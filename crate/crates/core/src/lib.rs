//! Numerical laboratory for the Monge-Ampère equation `det D^2 u = f` on the
//! half space `{x_n > 0}`: grids, exact reference solutions, a damped Newton
//! Dirichlet solver, linear nondivergence solvers with barrier checks,
//! far-field asymptote fitting and the expanding-domain scheme.

pub mod asymptotics;
pub mod cli;
pub mod error;
pub mod exterior;
pub mod field;
pub mod grid;
pub mod linear;
pub mod ma;
pub mod oracles;
pub mod sparse;

pub use error::{Error, Result};
pub use field::ScalarField;
pub use grid::{GridDescriptor, HalfGrid, NodeClass};
pub use ma::{SolverConfig, SourceTerm};
pub use oracles::QuadraticData;
