use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("masking ratio {ratio} would mask all {n} nodes")]
    MaskAll { ratio: f64, n: usize },

    #[error("degenerate mask: no masked nodes to compute the loss on")]
    DegenerateMask,

    #[error("CFL condition violated: dt = {dt} exceeds stable limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },

    #[error("incompatible datasets: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::Corrupt(_) => "corrupt",
            Error::Version { .. } => "version",
            Error::MaskAll { .. } => "mask_all",
            Error::DegenerateMask => "degenerate_mask",
            Error::Cfl { .. } => "cfl",
            Error::Diverged { .. } => "diverged",
            Error::Incompatible(_) => "incompatible",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
