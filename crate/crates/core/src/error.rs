use thiserror::Error;

/// Errors raised across the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-input: {0}")]
    EmptyInput(String),
    #[error("degenerate-mesh: {0}")]
    DegenerateMesh(String),
    #[error("open-mesh: {offending} of {probes} probe points have a fractional winding number")]
    OpenMesh { offending: usize, probes: usize },
    #[error("invalid-radius: {0}")]
    InvalidRadius(String),
    #[error("outside-band: no MLS support at the query point")]
    OutsideBand,
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
