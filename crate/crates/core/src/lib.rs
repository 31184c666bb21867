//! Mechanics of Lagrangian systems with symmetry on the Pontryagin bundle:
//! anholonomic frames and quasi-velocities, Routhian reduction at a momentum
//! value, Dirac-structure residuals, and structure-aware DAE integration.

pub mod dirac;
pub mod error;
pub mod eval;
pub mod frames;
pub mod integrator;
pub mod linalg;
pub mod scalar;
pub mod smat;
pub mod routh;
pub mod symmetry;
pub mod systems;

pub use error::{Error, Result};
