use std::fmt;

pub const OK: u8 = 0;
/// Invalid arguments, configuration or output directory.
pub const USAGE: u8 = 2;
pub const MISSING_ARTIFACTS: u8 = 3;
pub const VIOLATIONS: u8 = 4;
/// Training or evaluation failed.
pub const RUNTIME: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: anyhow::Error) -> Self {
        Self { code: USAGE, error }
    }

    pub fn missing(error: anyhow::Error) -> Self {
        Self {
            code: MISSING_ARTIFACTS,
            error,
        }
    }

    pub fn violations(error: anyhow::Error) -> Self {
        Self { code: VIOLATIONS, error }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self { code: RUNTIME, error }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}
