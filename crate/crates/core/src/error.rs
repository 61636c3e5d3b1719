//! Error taxonomy shared by every module.
//!
//! Each variant maps to one process exit code so shell harnesses can tell
//! usage mistakes apart from bad data, bad files, and numerical blowups.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter value is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The caller violated an API contract (wrong call order, mixed formats, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A training/eval input record is malformed.
    #[error("data error{}: {msg}", fmt_line(*.line))]
    Data { line: Option<usize>, msg: String },

    /// A checkpoint or report file is corrupt or has the wrong version.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced NaN/Inf or failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
}

fn fmt_line(line: Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

impl Error {
    pub fn data<S: Into<String>>(msg: S) -> Self {
        Error::Data { line: None, msg: msg.into() }
    }

    pub fn data_at<S: Into<String>>(line: usize, msg: S) -> Self {
        Error::Data { line: Some(line), msg: msg.into() }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Parameter(_) | Error::Usage(_) | Error::Config(_) => 1,
            Error::Data { .. } => 2,
            Error::Format(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_taxonomy() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::data("x").exit_code(), 2);
        assert_eq!(Error::Format("x".into()).exit_code(), 3);
        assert_eq!(Error::Numerical("x".into()).exit_code(), 4);
    }

    #[test]
    fn data_error_names_the_line() {
        let e = Error::data_at(17, "missing field");
        assert_eq!(e.to_string(), "data error at line 17: missing field");
    }
}
