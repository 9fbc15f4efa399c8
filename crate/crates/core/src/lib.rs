//! Willmore-type functionals on foliated hypersurfaces of Euclidean space.

pub mod catalog;
pub mod error;
pub mod functionals;
pub mod geom_patch;
pub mod grid;
pub mod jet;
pub mod ode;
pub mod quadrature;
pub mod revolution;
pub mod symfunc;
pub mod varcheck;

pub use error::{Error, Result};
