use std::fmt;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the command-line exit-code classes via
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training error: {message} (loss curve has {} points)", curve.len())]
    Training { message: String, curve: Vec<f64> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error class used for machine-parseable reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
    Input,
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorClass::Config => "config",
            ErrorClass::Numerical => "numerical",
            ErrorClass::Io => "io",
            ErrorClass::Input => "input",
        };
        f.write_str(s)
    }
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numerical(_) | Error::Training { .. } | Error::Dimension { .. } => {
                ErrorClass::Numerical
            }
            Error::Io(_) | Error::Format(_) => ErrorClass::Io,
            Error::Input(_) => ErrorClass::Input,
        }
    }

    /// 0 ok, 2 config, 3 numerical, 4 I/O. Input errors share the config code.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config | ErrorClass::Input => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
