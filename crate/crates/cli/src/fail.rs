//! Errors carrying the process exit code.

use std::fmt;

use alzhinet_core::Error;

pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;
pub const CHECKPOINT: i32 = 4;
pub const VERIFICATION: i32 = 5;

#[derive(Debug)]
pub struct Fail {
    pub code: i32,
    pub message: String,
}

impl Fail {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(DATA, message)
    }

    /// Classifies an error raised while reading inputs or running a module.
    pub fn from_core(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) => CONFIG,
            Error::Data(_) | Error::Io(_) | Error::Format(_) => DATA,
            Error::ParameterMismatch { .. } => CHECKPOINT,
            _ => 1,
        };
        Self::new(code, e.to_string())
    }

    /// Classifies an error raised while loading a checkpoint.
    pub fn checkpoint(path: &std::path::Path, e: Error) -> Self {
        Self::new(CHECKPOINT, format!("checkpoint {}: {e}", path.display()))
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Self::from_core(e)
    }
}

/// Output-side IO failures.
impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}
