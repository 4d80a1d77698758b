use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the pruning laboratory.
#[derive(Debug)]
pub enum Error {
    /// Two tensors or layer interfaces disagree on shape.
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    /// A configuration value is missing or out of range. Maps to a usage
    /// error at the CLI (exit code 2).
    Config(String),
    /// A data or checkpoint file does not follow its declared format.
    MalformedFile { path: String, detail: String },
    /// A label lies outside the configured class range.
    InvalidLabel { label: usize, num_classes: usize },
    /// More validation images requested than the pool holds.
    Oversample { requested: usize, available: usize },
    /// Training loss became non-finite.
    Divergence { epoch: usize, step: usize },
    /// Backward was called against a weight store mutated since forward.
    StaleRecord,
    /// The channel belongs to the final classifier layer and cannot be pruned.
    FinalLayerChannel { layer: usize, channel: usize },
    /// An operation that needs at least one element received none.
    Empty(&'static str),
    /// A sensitivity record is missing for a candidate channel.
    MissingRecord { layer: usize, channel: usize },
    Io(std::io::Error),
}

impl Error {
    /// True for errors that stem from user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidLabel { .. } | Error::Oversample { .. }
        )
    }

    pub(crate) fn shape_mismatch(
        context: impl Into<String>,
        expected: impl fmt::Debug,
        got: impl fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "shape mismatch in {context}: expected {expected}, got {got}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::MalformedFile { path, detail } => {
                write!(f, "malformed file {path}: {detail}")
            }
            Error::InvalidLabel { label, num_classes } => {
                write!(f, "label {label} outside class range 0..{num_classes}")
            }
            Error::Oversample {
                requested,
                available,
            } => write!(
                f,
                "requested {requested} validation images but pool holds only {available}"
            ),
            Error::Divergence { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
            Error::StaleRecord => {
                write!(f, "backward called on a record whose weights were mutated since forward")
            }
            Error::FinalLayerChannel { layer, channel } => write!(
                f,
                "channel ({layer}, {channel}) is in the final classifier layer and cannot be pruned"
            ),
            Error::Empty(what) => write!(f, "{what} is empty"),
            Error::MissingRecord { layer, channel } => {
                write!(f, "no sensitivity record for candidate channel ({layer}, {channel})")
            }
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
