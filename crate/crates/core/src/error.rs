use thiserror::Error;

/// Errors raised anywhere in the model, data, and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error{}: {msg}", record.as_ref().map(|r| format!(" in record `{r}`")).unwrap_or_default())]
    Parse { record: Option<String>, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use shape_err;

impl Error {
    pub(crate) fn parse(record: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Parse {
            record: record.map(str::to_owned),
            msg: msg.into(),
        }
    }
}
