//! Matrix-product-state eigensolvers for Heisenberg spin rings, compilation of
//! the resulting states into sequentially prepared quantum circuits, a
//! shot-based simulator with mid-circuit measurement, the measurement
//! protocols built on top of it, and an exact-diagonalization oracle.

pub mod compiler;
pub mod dmrg;
pub mod error;
pub mod linalg;
pub mod model;
pub mod mps;
pub mod oracle;
pub mod protocols;
pub mod sim;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{Mat, C64};
pub use model::{Axis, ModelParams, Spin};
pub use mps::{CanonicalForm, Mpo, MpsState};
