use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector (norm {norm:e} is at or below threshold {threshold:e})")]
    ZeroNorm { norm: f64, threshold: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("near-opposition: squared fused norm {norm_sq:e} is below 2*kappa = {threshold:e}")]
    NearOpposition { norm_sq: f64, threshold: f64 },

    #[error("margin violation: fused norm {norm:e} is below upsilon = {upsilon:e}")]
    MarginViolation { norm: f64, upsilon: f64 },

    #[error("row {row} is not unit norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("class {class} has no features")]
    EmptyClass { class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("rank {rank} is invalid (allowed range 1..={max})")]
    RankTooLarge { rank: usize, max: usize },

    #[error("degenerate cloud: centered matrix is numerically zero")]
    DegenerateCloud,

    #[error("matrix has no rows")]
    EmptyMatrix,

    #[error("basis is not column-orthonormal (max deviation {deviation:e})")]
    NonOrthonormalBasis { deviation: f64 },

    #[error("degenerate-regime: log argument {argument} must exceed 1")]
    DegenerateRegime { argument: f64 },

    #[error("l_con = {0} outside (0, 1]")]
    LConOutOfRange(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rank conflict: {0}")]
    RankConflict(String),

    #[error("non-finite value encountered at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("training failed at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic: expected \"MFTB\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    BadVersion(u32),

    #[error("unsupported dtype code {0}")]
    BadDtype(u8),

    #[error("reserved header bytes are not zero")]
    BadReserved,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}
