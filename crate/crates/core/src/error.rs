//! Error taxonomy shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("total internal reflection at back-face triangle {triangle} (cos of incidence {cos_incidence})")]
    TotalInternalReflection { triangle: usize, cos_incidence: f64 },

    #[error("refracted ray does not reach the image plane (direction z component {dir_z})")]
    RayMissesPlane { dir_z: f64 },

    #[error("ill-conditioned root: {0}")]
    IllConditionedRoot(String),

    #[error("no admissible refraction root in [0, 1]: {0}")]
    NoRefractionRoot(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("optimization did not converge: {0}")]
    NotConverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
