use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    /// An argument violated an operation's precondition (shapes, sizes, ranges).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A binary or text file did not conform to its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Content was well-formed but semantically unusable.
    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    /// A rank statistic is undefined for the given input (e.g. zero variance).
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! precondition {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Precondition(format!($($arg)+)));
        }
    };
}

pub(crate) use precondition;
