use thiserror::Error;

/// Every failure the library can report. The `Display` form starts with a
/// lowercase category word so the CLI can print it as an error prefix.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("group error: {0}")]
    Group(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("scheme error: {0}")]
    Scheme(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("context error: {0}")]
    Context(String),
    #[error("generator error: {0}")]
    Generator(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
