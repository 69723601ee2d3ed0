//! Error taxonomy shared by every module in the crate.
//!
//! The variants map onto how callers are expected to react: `Usage` and
//! `Config` mean the caller passed something structurally wrong (a CLI maps
//! these to exit code 2), while the remaining variants are runtime failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up; `op` names the failing operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Input values outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The call itself is malformed (empty inputs, bad argument combos).
    #[error("usage error: {0}")]
    Usage(String),

    /// A computation produced or would produce non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged or received invalid gradients; names the parameter.
    #[error("training error at {param}: {detail}")]
    Training { param: String, detail: String },

    /// Configuration file problems; `path` is the dotted key path.
    #[error("config error at {path}: {detail}")]
    Config { path: String, detail: String },

    /// A serialized artifact is corrupt or has the wrong magic/version.
    #[error("format error: {0}")]
    Format(String),

    /// A loaded artifact does not match the architecture expected here.
    #[error("mismatch error: {0}")]
    Mismatch(String),

    /// An iterative search did not converge; reports the best residual seen.
    #[error("search failed: {detail} (best residual {best_residual:.6e})")]
    SearchFailed { detail: String, best_residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate a malformed request rather than a
    /// runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config { .. })
    }
}
