use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("step out of range: {0}")]
    StepOutOfRange(String),

    #[error("invalid step order: t_prev={t_prev} must be < t={t}")]
    StepOrder { t: usize, t_prev: usize },

    #[error("downscale not supported: {from} -> {to}")]
    Downscale { from: String, to: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("window out of bounds: {0}")]
    OutOfBounds(String),

    #[error("count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("empty attention map")]
    EmptyMap,

    #[error("indivisible dimension: {0}")]
    Indivisible(String),

    #[error("missing permutation for timestep {0}")]
    MissingPermutation(usize),

    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),

    #[error("missing parameter: {0}")]
    MissingParams(String),

    #[error("backend failure (request {request_id}): {message}")]
    Backend { request_id: u64, message: String },

    #[error("backend returned wrong shape for request {request_id}: expected {expected}, got {got}")]
    ShapeViolation {
        request_id: u64,
        expected: String,
        got: String,
    },

    #[error("connection error (request {request_id}): {message}")]
    Connection { request_id: u64, message: String },

    #[error("timeout after {seconds}s (request {request_id})")]
    Timeout { request_id: u64, seconds: f64 },

    #[error("protocol version mismatch: engine {ours}, peer {theirs}")]
    VersionMismatch { ours: u16, theirs: u16 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: Location,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where in a generation run an error surfaced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Location {
    pub stage: Option<usize>,
    pub timestep: Option<usize>,
    pub patch: Option<usize>,
    /// Dilation sample index in the global branch.
    pub sample: Option<usize>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(s) = self.stage {
            parts.push(format!("stage {s}"));
        }
        if let Some(t) = self.timestep {
            parts.push(format!("timestep {t}"));
        }
        if let Some(p) = self.patch {
            parts.push(format!("patch {p}"));
        }
        if let Some(k) = self.sample {
            parts.push(format!("sample {k}"));
        }
        if parts.is_empty() {
            f.write_str("base pass")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

impl Error {
    pub fn at(self, context: Location) -> Error {
        Error::Context {
            context,
            source: Box::new(self),
        }
    }

    /// The innermost error with all location context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn shape(expected: impl fmt::Display, got: impl fmt::Display) -> Error {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
