use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input (out-of-vocab token, budget exceeded, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid or infeasible configuration. `key` is a dotted key path.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// A batch that cannot produce a meaningful statistic.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Non-finite or inconsistent numeric data.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
