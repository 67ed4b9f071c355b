use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op} on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid geometry in {op}: kernel {kernel} exceeds padded length {padded_len}")]
    InvalidGeometry {
        op: &'static str,
        kernel: usize,
        padded_len: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("numeric instability: non-finite value produced by {op}")]
    NumericInstability { op: String },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("channel mismatch for task {task}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        task: usize,
        expected: usize,
        got: usize,
    },

    #[error("signal too short: length {len} is below the minimum of {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("degenerate gate: {0}")]
    DegenerateGate(String),

    #[error("no gate decisions recorded")]
    EmptyStats,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training diverged: non-finite {loss} loss on task {task}")]
    Diverged { loss: &'static str, task: usize },

    #[error("out of memory: {0}")]
    OutOfMemory(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}
