use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bounds: {0}")]
    Bounds(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mode: {0}")]
    Mode(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
