use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input the implementation deliberately does not handle.
    #[error("unsupported input: {0}")]
    Unsupported(String),

    /// Invalid object construction (knots, weights, grids, scenario data).
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Geometric map with non-positive Jacobian determinant.
    #[error("singular geometric map at {location:?}: det J = {det:e}")]
    SingularMap { location: Vec<f64>, det: f64 },

    /// Newton point inversion did not reach the target point.
    #[error("point inversion failed for {point:?} after {iterations} iterations (distance {distance:e})")]
    Inversion {
        point: Vec<f64>,
        iterations: usize,
        distance: f64,
    },

    /// Deformation gradient with non-positive determinant inside an element.
    #[error("element {element} inverted: det F = {det:e}")]
    ElementInversion { element: usize, det: f64 },

    /// A fiber collocation point could not be located in the host patch.
    #[error("embedding failed at s = {arclength}: {reason}")]
    Embedding { arclength: f64, reason: String },

    /// Multiplier elimination impossible (singular slave block).
    #[error("condensation failed: {0}")]
    Condensation(String),

    /// Linear system (stiffness or KKT) is singular or numerically so.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// Newton iteration diverged or exhausted its iteration budget.
    #[error("nonlinear solve failed: {reason} (after {iterations} iterations, residual {residual:e})")]
    Divergence {
        reason: String,
        iterations: usize,
        residual: f64,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
