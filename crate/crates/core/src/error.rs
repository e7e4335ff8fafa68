use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("shape mismatch in {context}: {expected:?} vs {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("label out of range: sample {sample}, voxel {voxel} has label {label} but k_classes = {k}")]
    LabelOutOfRange {
        sample: String,
        voxel: usize,
        label: u16,
        k: usize,
    },

    #[error("ground truth outside [0, 1]: sample {sample}, voxel {voxel} = {value}")]
    GroundTruthRange {
        sample: String,
        voxel: usize,
        value: f32,
    },

    #[error("non-finite quantile: sample {sample}, voxel {voxel}")]
    NonFinite { sample: String, voxel: usize },

    #[error("infeasible split: requested {requested} samples but only {available} available")]
    InfeasibleSplit { requested: usize, available: usize },

    #[error("empty sample set")]
    EmptySet,

    #[error("group index {group} out of range for {k} groups")]
    GroupOutOfRange { group: usize, k: usize },

    #[error("lambda vector has {found} entries, expected {expected}")]
    LambdaLength { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("epsilon {epsilon} <= 1/(n_cal+1) = {bound} is unattainable with n_cal = {n_cal}")]
    Unattainable { epsilon: f64, n_cal: usize, bound: f64 },

    #[error("group {0} has positive weight but is absent from every optimization sample")]
    MissingSupport(usize),

    #[error("anchor problem is infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate phantom geometry after {0} attempts")]
    DegenerateGeometry(usize),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
