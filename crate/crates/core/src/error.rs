use thiserror::Error;

/// Errors raised by the solver pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("element {elem} is degenerate (det J = {det:e})")]
    DegenerateElement { elem: usize, det: f64 },

    #[error("element index {elem} out of range (mesh has {count} elements)")]
    ElementOutOfRange { elem: usize, count: usize },

    #[error("quadrature degree {degree} exceeds supported maximum {max}")]
    QuadratureDegree { degree: usize, max: usize },

    #[error("Gram-Schmidt norm collapse on element {elem} for extra basis function {index} (norm {norm:e})")]
    GramSchmidtCollapse { elem: usize, index: usize, norm: f64 },

    #[error("local Cholesky factorization failed on element {elem}")]
    LocalCholesky { elem: usize },

    #[error("global factorization failed: {0}")]
    GlobalFactorization(String),

    #[error("variant {0} has no stabilization subspace")]
    NoStabilizationSpace(&'static str),

    #[error("dof map collision at face {face}, mode {mode}")]
    DofCollision { face: usize, mode: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
