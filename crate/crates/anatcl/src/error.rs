//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ── tensor engine ────────────────────────────────────────────────
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got {elements} elements")]
    NonScalarLoss { elements: usize },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    // ── anatomy ──────────────────────────────────────────────────────
    #[error("ROI table is empty")]
    EmptyTable,
    #[error("atlas mismatch: expected {expected}, got {actual}")]
    AtlasMismatch { expected: String, actual: String },
    #[error("unknown subject: {0}")]
    UnknownSubject(String),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("ROI table missing entry for subject {subject}, roi {roi}, measure {measure}")]
    MissingEntry {
        subject: String,
        roi: usize,
        measure: String,
    },

    // ── losses ───────────────────────────────────────────────────────
    #[error("degenerate anchor {anchor}: all weights to other batch members are zero")]
    DegenerateAnchor { anchor: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // ── model / training ─────────────────────────────────────────────
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("loss variant {variant} requires an ROI table, but the cohort has none")]
    MissingDegrees { variant: String },
    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    // ── cohort ───────────────────────────────────────────────────────
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("subject id mismatch: {0}")]
    IdMismatch(String),
    #[error("malformed row in {file} at line {line}: {detail}")]
    MalformedRow { file: String, line: u64, detail: String },
    #[error("embedding width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    // ── probe ────────────────────────────────────────────────────────
    #[error("singular system: normal equations are not solvable without a ridge penalty")]
    SingularSystem,
    #[error("classification probe requires both classes, got a single class")]
    SingleClassInput,
    #[error("label not present in cohort: {0}")]
    LabelMissing(String),

    // ── shared ───────────────────────────────────────────────────────
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
