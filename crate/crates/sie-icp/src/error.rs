use thiserror::Error;

/// Errors produced by registration, fitting and I/O routines.
#[derive(Error, Debug)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("point-to-plane residuals require target normals")]
    MissingNormals,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no values fall inside the histogram range [{lo}, {hi}]")]
    EmptyHistogram { lo: f64, hi: f64 },

    #[error("too few values: got {got}, need at least {need}")]
    TooFewValues { got: usize, need: usize },

    #[error("column has no scale information (all values identical)")]
    DegenerateColumn,

    #[error("non-positive residual scale factor {value} at ({row}, {col})")]
    NonPositiveScale { row: usize, col: usize, value: f64 },

    #[error("no correspondences to refine")]
    EmptyMatches,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
