use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point ({x}, {y}, {z}) lies on the vertical axis; zenith is undefined")]
    DegenerateAxis { x: f64, y: f64, z: f64 },

    #[error("beam labeling needs {k} distinct zenith values, found {found}")]
    InsufficientZeniths { k: usize, found: usize },

    #[error("beam cluster {0} is empty after k-means convergence")]
    EmptyCluster(usize),

    #[error("labeling covers {labels} points but the cloud has {points}")]
    InconsistentLabeling { labels: usize, points: usize },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("no beam variants given")]
    NoVariants,

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("embedding {0} has zero norm")]
    ZeroNormEmbedding(usize),

    #[error("edge value {value} at ({row}, {col}) is outside [{lo}, {hi}]")]
    NotNormalized {
        row: usize,
        col: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("backward called without a cached forward pass")]
    MissingCache,

    #[error("grid spec has no cells or an extent not divisible by the cell size")]
    EmptyGridSpec,

    #[error("roi {0} samples outside the grid extent")]
    RoiOutOfExtent(usize),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("closed gap is undefined when oracle AP equals source-only AP ({0})")]
    DegenerateGap(f64),

    #[error("{path}: {len} bytes is not a multiple of 16")]
    MalformedBin { path: PathBuf, len: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("scene spec yields no rays")]
    EmptyScene,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
