use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: columns are zero or parallel")]
    DegenerateRotation6D,

    #[error("frame {0} is missing from the sequence directory")]
    MissingFrame(usize),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sequence has {0} frame(s); at least 2 are required")]
    EmptySequence(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud is degenerate (bounding box diagonal {0:e})")]
    DegenerateCloud(f64),

    #[error("cannot form {clusters} clusters from {points} points")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("silhouette needs at least two groups")]
    SingleGroup,

    #[error("optimization diverged: loss {loss:e} exceeds 10x initial loss {initial:e}")]
    DivergedOptimization { loss: f64, initial: f64 },
    #[error("registration failed at frame {frame}: chamfer {chamfer:e} exceeds {limit:e}")]
    RegistrationFailed {
        frame: usize,
        chamfer: f64,
        limit: f64,
    },

    #[error("track shows no relative motion between clusters")]
    DegenerateTrack,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("link {0} is reachable through two different parents")]
    CyclicConnectivity(usize),

    #[error("joint between links {parent} and {child} shows insufficient motion")]
    InsufficientMotion { parent: usize, child: usize },

    #[error("no cell straddles the iso level")]
    EmptySurface,

    #[error("joints do not match the tree edges: {0}")]
    TreeJointMismatch(String),
    #[error("unknown joint name `{0}`")]
    UnknownJointName(String),
    #[error("no mesh for link `{0}`")]
    MissingMesh(String),
    #[error("invalid URDF: {0}")]
    Urdf(String),

    #[error("no joint correspondence between prediction and ground truth")]
    NoCorrespondence,

    #[error("first frames of sequences {0} and {1} are not aligned (chamfer {2:e})")]
    Alignment(usize, usize, f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}
