use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("fixed bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),

    #[error("adaptive bandwidth rank must satisfy 1 <= k < n, got k = {k} with n = {n}")]
    BadBandwidthRank { k: usize, n: usize },

    #[error("degenerate adaptive bandwidth at point {point}: neighbour {k} is at distance zero (duplicate points)")]
    DegenerateBandwidth { point: usize, k: usize },

    #[error("row width must satisfy 1 <= n_top < n, got n_top = {n_top} with n = {n}")]
    BadTopK { n_top: usize, n: usize },

    #[error("weight at ({i}, {j}) is negative or non-finite: {value}")]
    BadWeight { i: usize, j: usize, value: f64 },

    #[error("vertex {0} is isolated; cannot normalize")]
    IsolatedVertex(usize),

    #[error("weights are not symmetric at ({i}, {j}): {a} vs {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },

    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix size {n} exceeds the dense eigensolver limit {limit}; use the power-iteration bound for larger graphs")]
    EigenSizeLimit { n: usize, limit: usize },

    #[error("Jacobi sweep did not converge after {sweeps} sweeps (off-diagonal mass {off})")]
    EigenNoConvergence { sweeps: usize, off: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("diffusion step {gamma} exceeds the stability bound {bound} ({rule})")]
    UnstableStep {
        gamma: f64,
        bound: f64,
        rule: &'static str,
    },

    #[error("no labeled rows in the loss mask")]
    EmptyMask,

    #[error("label {label} out of range for {classes} classes at row {row}")]
    BadLabel {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("feature row {0} has zero norm; cannot normalize")]
    ZeroFeature(usize),

    #[error("class {class} has {have} points, needs {need}")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("set distance is undefined with fewer than two nonempty subsets")]
    SingleSubset,

    #[error("no direction with pairwise-distinct projections after {retries} draws (duplicate points?)")]
    DegenerateProjection { retries: usize },

    #[error("subsets {a} and {b} have overlapping projections in every tested direction")]
    NotParallelSeparable { a: usize, b: usize },

    #[error("flow construction needs dimension >= 2, got {0}")]
    FlowDimension(usize),

    #[error("labels must be binary (0/1) for flow construction, got {label} at row {row}")]
    NonBinaryLabel { row: usize, label: usize },

    #[error("could not place {m} cluster centres with separation {sep} after {retries} retries")]
    PlacementFailed { m: usize, sep: f64, retries: usize },

    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    EdgeOutOfRange { u: usize, v: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
