use thiserror::Error;

pub type Result<T> = std::result::Result<T, FvError>;

/// What went wrong while decoding one of the binary formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    UnsupportedVersion(u32),
    Truncated { needed: usize, available: usize },
    InvalidValue(String),
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::Truncated { needed, available } => {
                write!(f, "truncated payload: need {needed} bytes, {available} available")
            }
            ParseErrorKind::InvalidValue(msg) => write!(f, "invalid value: {msg}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FvError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("matrix inversion failed: {0}")]
    Inversion(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FvError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FvError::Shape(msg.into())
    }
}
