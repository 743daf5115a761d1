use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Errors produced by the numerical engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not agree with what an operation requires.
    Shape(String),
    /// An argument is outside its valid domain (stride 0, empty scale list, ...).
    InvalidArgument(String),
    /// A NaN or infinity appeared where only finite values are allowed.
    NonFinite(String),
    /// Two evaluations of a function that must be deterministic disagreed.
    NonDeterministic(String),
    /// Training produced a non-finite loss.
    Diverged { iteration: usize },
    /// An error raised inside a named network stage.
    Stage { stage: String, source: Box<Error> },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    /// The innermost error beneath any stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::NonDeterministic(msg) => write!(f, "non-deterministic function: {msg}"),
            Error::Diverged { iteration } => {
                write!(f, "training diverged (non-finite loss) at iteration {iteration}")
            }
            Error::Stage { stage, source } => write!(f, "{stage}: {source}"),
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

/// Attaches a stage name to errors bubbling out of a network component.
pub trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: String::from(name),
            source: Box::new(e),
        })
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}

pub(crate) use arg_err;
pub(crate) use shape_err;
