use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),

    #[error("invalid density operator: {0}")]
    InvalidDensity(String),

    #[error("state has zero norm")]
    ZeroNorm,

    #[error("operation needs {entries} entries, cap is {cap}")]
    TooLarge { entries: usize, cap: usize },

    #[error("eigendecomposition residual {0:e} above tolerance")]
    EigenResidual(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pupil undersampled: spacing {spacing:e} m, need at most {required:e} m")]
    Undersampled { spacing: f64, required: f64 },

    #[error("detection efficiency {0:e} below floor; the source missed the detector")]
    LowEfficiency(f64),

    #[error("photon stream exhausted after {0} photons")]
    StreamExhausted(u64),

    #[error("phase synthesis failed: {0}")]
    PhaseSynthesis(String),

    #[error("no feasible plan: {0}")]
    Infeasible(String),

    #[error("estimate is degenerate: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
