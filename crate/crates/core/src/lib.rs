//! Mortar-coupled isogeometric analysis.
//!
//! Spline and NURBS bases, multi-patch geometry, biorthogonal multiplier
//! bases with crosspoint modification, weak C0/C1 coupling of 2D patches,
//! hyperelastic continua, a geometrically exact collocated beam and the
//! reduced coupling of an embedded beam with a 3D matrix.

pub mod beam;
pub mod continuum;
pub mod driver;
pub mod dual;
pub mod embedded;
pub mod error;
pub mod mortar;
pub mod patch;
pub mod quadrature;
pub mod scenario;
pub mod solver;
pub mod sparse;
pub mod studies;
pub mod spline;

pub use error::{Error, Result};
