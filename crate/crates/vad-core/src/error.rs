use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: output size not an integer for input {input}, kernel {kernel}, stride {stride}, pad {pad}")]
    NonExactConv {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable {id} does not belong to this graph")]
    DetachedVar { id: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid learning rate {lr}")]
    InvalidLearningRate { lr: f64 },
    #[error("optimizer state does not match parameter shapes")]
    OptimizerStateMismatch,
    #[error("invalid stride {stride}")]
    InvalidStride { stride: usize },
}

#[derive(Debug, Error)]
pub enum VadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scenario collision at frame {frame}: lead gap reached zero (check speeds, gap, braking profile)")]
    Collision { frame: usize },
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("{0}")]
    Other(String),
}

impl VadError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VadError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = VadError> = std::result::Result<T, E>;
