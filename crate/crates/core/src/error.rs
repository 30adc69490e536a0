use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{}: {detail}", location(.path, *.line, .field.as_deref()))]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        field: Option<String>,
        detail: String,
    },

    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("missing artifact {}: {hint}", .path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(path: &std::path::Path, line: Option<usize>, field: Option<&str>) -> String {
    let mut s = path.display().to_string();
    if let Some(line) = line {
        s.push_str(&format!(" line {line}"));
    }
    if let Some(field) = field {
        s.push_str(&format!(" field `{field}`"));
    }
    s
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
