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
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("volume blob holds {actual} bytes but dims require {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("label {label} exceeds declared class count {num_classes}")]
    LabelOutOfRange { label: u32, num_classes: u32 },
    #[error("volume has no foreground voxels")]
    EmptyForeground,
    #[error("graph voxel {0:?} lies on background")]
    VoxelOnBackground([usize; 3]),
    #[error("empty point set")]
    EmptyPointSet,
    #[error("requested {k} neighbours from a set of {available}")]
    TooFewPoints { k: usize, available: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graph is empty")]
    EmptyGraph,
    #[error("edge {edge} references missing node {node}")]
    DanglingEdge { edge: usize, node: usize },
    #[error("node {0} has no self-loop in the attention adjacency")]
    MissingSelfLoop(usize),
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tree geometry left the grid after {0} attempts")]
    GeometryRejected(usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Stable machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyForeground => "empty_foreground",
            Error::VoxelOnBackground(_) => "voxel_on_background",
            Error::EmptyPointSet => "empty_point_set",
            Error::TooFewPoints { .. } => "too_few_points",
            Error::Shape(_) => "shape",
            Error::EmptyGraph => "empty_graph",
            Error::DanglingEdge { .. } => "dangling_edge",
            Error::MissingSelfLoop(_) => "missing_self_loop",
            Error::TopologyMismatch(_) => "topology_mismatch",
            Error::Config(_) => "config",
            Error::GeometryRejected(_) => "geometry_rejected",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
